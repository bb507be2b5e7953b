"""Binary containers: SLIM models (with bitmask-packed pruned layers) and SLMT soft targets.

SLIM layout, all little-endian::

    b"SLIM" | version u32 | input C,H,W u32 x3 | classes u32 | layer count u32
    per layer:  kind u8 | [batchnorm: momentum f64, eps f64] | tensor count u8
    per tensor: role u8 | storage u8 | ndim u8 | extents u32 x ndim | payload

Dense payload is numel f32 values.  Masked payload is ceil(numel / 8) mask
bytes (bit i of byte j covers flat index 8j + i) followed by one f32 per
kept entry.

SLMT layout::

    b"SLMT" | version u32 | count u64 | classes u32 | temperature f64 | f32 rows
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..errors import DataError, FormatError, TruncatedFileError
from ..nn.layers import BatchNorm, Conv2d, Dense, Flatten, MaxPool2x2, ReLU
from ..nn.model import Model

SLIM_MAGIC = b"SLIM"
SLIM_VERSION = 1
SLMT_MAGIC = b"SLMT"
SLMT_VERSION = 1

KIND_TAGS = {"conv2d": 1, "dense": 2, "relu": 3, "maxpool2x2": 4, "flatten": 5, "batchnorm": 6}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}
ROLE_TAGS = {"weight": 0, "bias": 1, "scale": 2, "shift": 3, "running_mean": 4, "running_var": 5}
TAG_ROLES = {v: k for k, v in ROLE_TAGS.items()}
#: roles that count as trainable parameters (buffers excluded)
PARAM_ROLES = {"weight", "bias", "scale", "shift"}
DENSE, MASKED = 0, 1


class LoadedModel(NamedTuple):
    model: Model
    mask: dict[str, np.ndarray]


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: unexpected end of file at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _tensor_record(role: str, arr: np.ndarray, keep: np.ndarray | None) -> bytes:
    head = struct.pack("<BBB", ROLE_TAGS[role], DENSE if keep is None else MASKED, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    if keep is None:
        return head + arr.astype("<f4").tobytes()
    flat_keep = keep.reshape(-1)
    bits = np.packbits(flat_keep, bitorder="little").tobytes()
    return head + bits + arr.reshape(-1)[flat_keep].astype("<f4").tobytes()


def model_to_bytes(model: Model, mask: dict[str, np.ndarray] | None = None) -> bytes:
    mask = mask or {}
    out = [SLIM_MAGIC, struct.pack("<I3III", SLIM_VERSION, *model.input_shape,
                                   model.num_classes, len(model.layers))]
    for i, layer in enumerate(model.layers):
        out.append(struct.pack("<B", KIND_TAGS[layer.kind]))
        if isinstance(layer, BatchNorm):
            out.append(struct.pack("<dd", layer.momentum, layer.eps))
        tensors = [(n, layer.params[n]) for n in layer.param_names if n in layer.params]
        tensors += [(n, layer.buffers[n]) for n in layer.buffer_names]
        out.append(struct.pack("<B", len(tensors)))
        for name, arr in tensors:
            keep = mask.get(f"{i}.{name}")
            if keep is not None and keep.shape != arr.shape:
                raise DataError(f"mask for {i}.{name} has shape {keep.shape}, tensor {arr.shape}")
            out.append(_tensor_record(name, arr, keep))
    return b"".join(out)


def save_model(model: Model, path, mask: dict[str, np.ndarray] | None = None) -> int:
    """Write ``model`` to ``path``; masked tensors are bit-packed.  Returns bytes written."""
    data = model_to_bytes(model, mask)
    Path(path).write_bytes(data)
    return len(data)


def _read_tensor(r: _Reader):
    role_tag, storage, ndim = r.unpack("BBB")
    if role_tag not in TAG_ROLES or storage not in (DENSE, MASKED):
        raise FormatError(f"{r.path}: bad tensor record (role {role_tag}, storage {storage})")
    shape = r.unpack(f"{ndim}I")
    numel = int(np.prod(shape))
    if storage == DENSE:
        values = np.frombuffer(r.take(4 * numel), dtype="<f4").astype(np.float64)
        return TAG_ROLES[role_tag], values.reshape(shape), None
    bits = np.frombuffer(r.take((numel + 7) // 8), dtype=np.uint8)
    keep = np.unpackbits(bits, bitorder="little", count=numel).astype(bool)
    kept = int(keep.sum())
    values = np.zeros(numel)
    values[keep] = np.frombuffer(r.take(4 * kept), dtype="<f4")
    return TAG_ROLES[role_tag], values.reshape(shape), keep.reshape(shape)


def _read_header(r: _Reader):
    if r.take(4) != SLIM_MAGIC:
        raise FormatError(f"{r.path}: not a SLIM model file")
    version, c, h, w, classes, count = r.unpack("I3III")
    if version != SLIM_VERSION:
        raise FormatError(f"{r.path}: SLIM version {version}, this reader supports {SLIM_VERSION}")
    return (c, h, w), classes, count


def model_from_bytes(raw: bytes, path="<bytes>") -> LoadedModel:
    r = _Reader(raw, path)
    input_shape, classes, count = _read_header(r)
    layers, mask = [], {}
    for i in range(count):
        (tag,) = r.unpack("B")
        kind = TAG_KINDS.get(tag)
        if kind is None:
            raise FormatError(f"{path}: unknown layer tag {tag}")
        hyper = r.unpack("dd") if kind == "batchnorm" else ()
        (n_tensors,) = r.unpack("B")
        tensors = {}
        for _ in range(n_tensors):
            role, arr, keep = _read_tensor(r)
            tensors[role] = arr
            if keep is not None:
                mask[f"{i}.{role}"] = keep
        try:
            if kind == "conv2d":
                layers.append(Conv2d(tensors["weight"], tensors.get("bias")))
            elif kind == "dense":
                layers.append(Dense(tensors["weight"], tensors.get("bias")))
            elif kind == "batchnorm":
                layers.append(BatchNorm(tensors["scale"], tensors["shift"], tensors["running_mean"],
                                        tensors["running_var"], *hyper))
            else:
                layers.append({"relu": ReLU, "maxpool2x2": MaxPool2x2, "flatten": Flatten}[kind]())
        except KeyError as exc:
            raise FormatError(f"{path}: layer {i} ({kind}) lacks tensor {exc}") from exc
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    try:
        return LoadedModel(Model(layers, input_shape, classes), mask)
    except Exception as exc:
        raise FormatError(f"{path}: stored layers do not compose: {exc}") from exc


def load_model(path) -> LoadedModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return model_from_bytes(path.read_bytes(), path)


def file_param_stats(path) -> dict[str, int]:
    """Count parameters straight from a SLIM file without building layers.

    Returns totals over conv/dense weight tensors (``weights``,
    ``nonzero_weights``) and over all trainable tensors (``params``,
    ``nonzero_params``).
    """
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _, _, count = _read_header(r)
    stats = dict(weights=0, nonzero_weights=0, params=0, nonzero_params=0)
    for _ in range(count):
        (tag,) = r.unpack("B")
        kind = TAG_KINDS.get(tag)
        if kind is None:
            raise FormatError(f"{path}: unknown layer tag {tag}")
        if kind == "batchnorm":
            r.unpack("dd")
        (n_tensors,) = r.unpack("B")
        for _ in range(n_tensors):
            role, arr, _keep = _read_tensor(r)
            nnz = int(np.count_nonzero(arr))
            if role in PARAM_ROLES:
                stats["params"] += arr.size
                stats["nonzero_params"] += nnz
            if role == "weight" and kind in ("conv2d", "dense"):
                stats["weights"] += arr.size
                stats["nonzero_weights"] += nnz
    return stats


def save_soft_targets(soft, path) -> int:
    probs = np.asarray(soft.probs)
    header = SLMT_MAGIC + struct.pack("<IQId", SLMT_VERSION, probs.shape[0], probs.shape[1],
                                      float(soft.temperature))
    data = header + probs.astype("<f4").tobytes()
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise DataError(f"{path}: cannot write soft targets: {exc}") from exc
    return len(data)


def load_soft_targets(path):
    """Read an SLMT cache; rows are renormalized in float64 after the f32 round trip."""
    from ..distill import SoftTargets

    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != SLMT_MAGIC:
        raise FormatError(f"{path}: not an SLMT soft-target file")
    version, count, classes, temperature = r.unpack("IQId")
    if version != SLMT_VERSION:
        raise FormatError(f"{path}: SLMT version {version}, this reader supports {SLMT_VERSION}")
    probs = np.frombuffer(r.take(4 * count * classes), dtype="<f4").astype(np.float64)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    probs = probs.reshape(count, classes)
    probs /= probs.sum(axis=1, keepdims=True)
    return SoftTargets(probs, temperature)

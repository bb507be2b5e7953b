"""Datasets: IDX and CIFAR-10 binary readers/writers and synthetic blobs."""
from __future__ import annotations

import gzip
import importlib.util
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError, FormatError, ParameterError, TruncatedFileError
from ..tensor import DTYPE, Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    """Images ``(count, channels, H, W)`` in [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (count, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes)

    def take(self, n: int) -> Dataset:
        return self.subset(np.arange(min(n, len(self))))


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX magic")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels are scaled by 1/255."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None, :, :] / 255.0, labels, split, num_classes)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels: np.ndarray):
    """Write uint8 images ``(count, H, W)`` and labels as an IDX pair."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    opener = lambda p: gzip.open(p, "wb") if str(p).endswith(".gz") else open(p, "wb")  # noqa: E731
    with opener(images_path) as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images_u8.shape))
        f.write(images_u8.tobytes())
    with opener(labels_path) as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_cifar_binary(path, split: str = "train") -> Dataset:
    """Read a CIFAR-10 binary batch: records of 1 label byte + 3072 R,G,B plane bytes."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32) / 255.0
    return Dataset(images, labels, split, 10)


def write_cifar_binary(path, images_u8: np.ndarray, labels: np.ndarray):
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    with open(path, "wb") as f:
        f.write(np.concatenate([labels, images_u8], axis=1).tobytes())


def synthetic_blobs(rng: Rng, count: int, classes: int, shape=(1, 8, 8), noise: float = 0.1,
                    split: str = "train", prototypes: np.ndarray | None = None) -> Dataset:
    """Class-conditional Gaussian blobs around random prototype images.

    Labels are balanced and shuffled.  Pixels are clipped to [0, 1].  Passing
    the same ``prototypes`` with different generators yields train/test splits
    drawn from one distribution but with independent noise.
    """
    if classes < 2:
        raise ParameterError(f"need at least 2 classes, got {classes}")
    shape = tuple(shape)
    if prototypes is None:
        prototypes = blob_prototypes(rng, classes, shape)
    labels = rng.permutation(np.arange(count) % classes)
    images = prototypes[labels]
    if noise > 0:
        images = images + noise * rng.normal((count, *shape))
    return Dataset(np.clip(images, 0.0, 1.0), labels, split, classes)


def blob_prototypes(rng: Rng, classes: int, shape) -> np.ndarray:
    return rng.uniform((classes, *shape))


def synthetic_split(seed: int, n_train: int, n_test: int, classes: int = 2, shape=(1, 8, 8),
                    noise: float = 0.1) -> tuple[Dataset, Dataset]:
    proto_rng, train_rng, test_rng = Rng(seed).split(3)
    protos = blob_prototypes(proto_rng, classes, shape)
    train = synthetic_blobs(train_rng, n_train, classes, shape, noise, "train", protos)
    test = synthetic_blobs(test_rng, n_test, classes, shape, noise, "test", protos)
    return train, test


def _bundled_mnist_csv() -> Path:
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise DataError("the bundled MNIST sample needs the optional 'mlxtend' package "
                        "(pip install mlxtend), or set MNIST_DIR to a folder of IDX files")
    path = Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise DataError(f"{path}: bundled MNIST sample not found")
    return path


def export_mnist_subset(out_dir, n_train: int = 4000, n_test: int = 1000, seed: int = 0) -> Path:
    """Write a class-stratified MNIST subset as IDX files under ``out_dir``.

    The source is the 5000-digit MNIST sample shipped inside ``mlxtend``
    (500 per class).  Files: ``train-images-idx3-ubyte`` etc.
    """
    table = np.loadtxt(_bundled_mnist_csv(), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1]
    if n_train + n_test > len(labels):
        raise ParameterError(f"subset of {n_train}+{n_test} exceeds {len(labels)} examples")
    rng = Rng(seed)
    train_idx, test_idx = [], []
    classes = np.unique(labels)
    per_train, per_test = n_train // len(classes), n_test // len(classes)
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        train_idx.extend(members[:per_train])
        test_idx.extend(members[per_train:per_train + per_test])
    train_idx = rng.permutation(np.array(train_idx))
    test_idx = rng.permutation(np.array(test_idx))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte",
              pixels[train_idx], labels[train_idx])
    write_idx(out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte",
              pixels[test_idx], labels[test_idx])
    return out


def load_mnist_subset(cache_dir=None, n_train: int = 4000, n_test: int = 1000,
                      seed: int = 0) -> tuple[Dataset, Dataset]:
    """Desk-scale MNIST: IDX files from ``$MNIST_DIR`` if set, else the bundled sample.

    With ``MNIST_DIR`` the first ``n_train``/``n_test`` examples of the
    standard files are used.
    """
    mnist_dir = os.environ.get("MNIST_DIR")
    if mnist_dir:
        d = Path(mnist_dir)
        train = load_idx(_first_existing(d, "train-images-idx3-ubyte"),
                         _first_existing(d, "train-labels-idx1-ubyte"), "train")
        test = load_idx(_first_existing(d, "t10k-images-idx3-ubyte"),
                        _first_existing(d, "t10k-labels-idx1-ubyte"), "test")
        return train.take(n_train), test.take(n_test)
    if cache_dir is None:
        cache_dir = Path(os.environ.get("NNCOMPRESS_CACHE", Path.home() / ".cache" / "nncompress"))
    d = Path(cache_dir) / f"mnist-{n_train}-{n_test}-{seed}"
    if not (d / "t10k-labels-idx1-ubyte").exists():
        export_mnist_subset(d, n_train, n_test, seed)
    train = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte", "train")
    test = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte", "test")
    return train, test


def _first_existing(d: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (d / name).exists():
            return d / name
    raise DataError(f"{d}: missing {stem}")

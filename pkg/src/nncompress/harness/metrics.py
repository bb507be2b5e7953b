"""Compression accounting, inference timing and the per-stage report record.

Compression counts the weight tensors of conv and dense layers, the tensors
pruning masks and factorization rewrites.  Biases and BatchNorm affine terms
are reported separately as ``aux_params``.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from ..errors import ParameterError
from ..nn.layers import Conv2d, Dense
from ..nn.model import Model
from ..nn.train import predict

if TYPE_CHECKING:
    from .data import Dataset


@dataclass(frozen=True)
class ParamCount:
    total: int
    nonzero: int
    aux: int


def count_params(model: Model) -> ParamCount:
    total = nonzero = aux = 0
    for i, layer in enumerate(model.layers):
        for name, p in layer.params.items():
            if name == "weight" and isinstance(layer, (Conv2d, Dense)):
                total += p.size
                nonzero += int(np.count_nonzero(p))
            else:
                aux += p.size
    return ParamCount(total, nonzero, aux)


def compression_rate(baseline: Model, compressed: Model) -> float:
    """Baseline nonzero weight count over compressed nonzero weight count."""
    base = count_params(baseline).nonzero
    comp = count_params(compressed).nonzero
    if comp == 0:
        raise ParameterError("compressed model has no nonzero weights")
    return base / comp


def measure_inference(model: Model, data: Dataset, repeats: int = 5, batch_size: int = 500) -> float:
    """Median wall-clock seconds of a full eval-mode pass over ``data``, after one warm-up."""
    if repeats < 3:
        raise ParameterError(f"need at least 3 repeats for a median, got {repeats}")
    predict(model, data.images[:batch_size], batch_size)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        predict(model, data.images, batch_size)
        times.append(time.perf_counter() - start)
    return statistics.median(times)


TIMING_FIELDS = ("inference_seconds", "speedup")


@dataclass
class CompressionReport:
    method: str
    total_params: int
    nonzero_params: int
    disk_bytes: int
    compression_rate: float
    inference_seconds: float | None
    speedup: float | None
    accuracy: float | None
    aux_params: int = 0
    #: rate relative to the previous pipeline stage (equals compression_rate for a lone pass)
    stage_rate: float | None = None
    traces: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.nonzero_params > self.total_params:
            raise ParameterError("nonzero_params exceeds total_params")

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            for key in TIMING_FIELDS:
                d.pop(key)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CompressionReport:
        d = dict(d)
        for key in TIMING_FIELDS:
            d.setdefault(key, None)
        return cls(**d)

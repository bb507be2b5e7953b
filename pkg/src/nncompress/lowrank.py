"""Low-rank factorization of d x d convolutions into vertical/horizontal pairs.

A ``C x d x d x N`` kernel is reshaped into a ``Cd x dN`` matrix whose rows
index (input channel, kernel row) and whose columns index (output channel,
kernel column).  Its truncated SVD gives a ``d x 1`` convolution with K
outputs followed by a ``1 x d`` convolution with N outputs.
"""
from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .nn.layers import BatchNorm, Conv2d
from .nn.model import Model
from .tensor import DTYPE, SvdResult, numerical_rank, svd

log = logging.getLogger(__name__)

SvdFn = Callable[[np.ndarray], SvdResult]


def matricize_index(i1: int, i2: int, i3: int, i4: int, d: int) -> tuple[int, int]:
    """1-based tensor index ``(c, row, col, n)`` to 1-based matrix index ``(j1, j2)``."""
    return (i1 - 1) * d + i2, (i4 - 1) * d + i3


def matricize(w: np.ndarray) -> np.ndarray:
    """``M[c*d + r, n*d + s] = w[c, r, s, n]`` (0-based)."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise ParameterError(f"expected a (C, d, d, N) kernel, got shape {w.shape}")
    c, d, d2, n = w.shape
    if d != d2:
        raise ParameterError(f"spatial kernel must be square, got {d}x{d2}")
    return w.transpose(0, 1, 3, 2).reshape(c * d, n * d)


def dematricize(m: np.ndarray, c: int, d: int, n: int) -> np.ndarray:
    m = np.asarray(m)
    if m.shape != (c * d, d * n):
        raise ParameterError(f"matrix shape {m.shape} does not match C={c}, d={d}, N={n}")
    return m.reshape(c, d, n, d).transpose(0, 1, 3, 2)


@dataclass
class SeparablePair:
    """Vertical kernel ``(C, d, 1, K)``, horizontal kernel ``(K, 1, d, N)`` and their spectrum."""

    v_kernel: np.ndarray
    h_kernel: np.ndarray
    singular_values: np.ndarray
    h_batchnorm: BatchNorm = field(default=None)

    def __post_init__(self):
        if self.h_batchnorm is None:
            self.h_batchnorm = BatchNorm.identity(self.h_kernel.shape[3])

    @property
    def rank(self) -> int:
        return self.v_kernel.shape[3]

    def recompose(self) -> np.ndarray:
        """The ``(C, d, d, N)`` kernel equal to applying V then H."""
        return np.einsum("crk,ksn->crsn", self.v_kernel[:, :, 0, :], self.h_kernel[:, 0, :, :])

    def truncation_error(self) -> float:
        """Frobenius norm of the discarded spectrum."""
        return float(np.sqrt(np.sum(self.singular_values[self.rank:] ** 2)))


def factorize_layer(w: np.ndarray, k: int, svd_fn: SvdFn = svd) -> SeparablePair:
    """Split a square conv kernel into rank-``k`` vertical and horizontal kernels.

    Both factors carry ``sqrt`` of the singular value, so
    ``V[c, r, 0, k] = U[c*d + r, k] sqrt(s_k)`` and
    ``H[k, 0, s, n] = V[n*d + s, k] sqrt(s_k)``.
    """
    m = matricize(w)
    c, d, _, n = w.shape
    if not 1 <= k <= min(m.shape):
        raise ParameterError(f"rank {k} outside [1, {min(m.shape)}] for kernel {w.shape}")
    dec = svd_fn(m)
    root = np.sqrt(dec.s[:k])
    v_kernel = (dec.u[:, :k] * root).reshape(c, d, 1, k)
    h_kernel = (dec.v[:, :k] * root).reshape(n, d, k).transpose(2, 1, 0)[:, None, :, :]
    return SeparablePair(np.ascontiguousarray(v_kernel, dtype=DTYPE),
                         np.ascontiguousarray(h_kernel, dtype=DTYPE), np.asarray(dec.s))


@dataclass
class FactorizationPlan:
    """Target rank per conv layer index."""

    ranks: dict[int, int] = field(default_factory=dict)

    def validate(self, model: Model):
        for idx, k in self.ranks.items():
            if not 0 <= idx < len(model.layers) or not isinstance(model.layers[idx], Conv2d):
                raise ParameterError(f"plan entry {idx} is not a conv layer")
            layer = model.layers[idx]
            kh, kw = layer.kernel_size
            if kh != kw:
                raise ParameterError(f"layer {idx} has a non-square {kh}x{kw} kernel")
            limit = min(layer.in_channels * kh, kh * layer.out_channels)
            if not 1 <= k <= limit:
                raise ParameterError(f"rank {k} for layer {idx} outside [1, {limit}]")

    def to_dict(self) -> dict[str, int]:
        return {str(i): k for i, k in sorted(self.ranks.items())}

    @classmethod
    def from_dict(cls, d: dict) -> FactorizationPlan:
        return cls({int(i): int(k) for i, k in d.items()})


def _factorizable(layer) -> bool:
    if not isinstance(layer, Conv2d):
        return False
    kh, kw = layer.kernel_size
    return kh == kw and kh > 1


def choose_ranks(model: Model, energy: float = 0.9, svd_fn: SvdFn = svd) -> FactorizationPlan:
    """Per factorizable conv, the smallest K whose top-K spectrum holds ``energy`` of the total."""
    if not 0.0 < energy <= 1.0:
        raise ParameterError(f"energy must lie in (0, 1], got {energy}")
    ranks = {}
    for idx, layer in enumerate(model.layers):
        if not _factorizable(layer):
            continue
        s = svd_fn(matricize(layer.params["weight"])).s
        ranks[idx] = rank_for_energy(s, energy)
    return FactorizationPlan(ranks)


def rank_for_energy(s: np.ndarray, energy: float) -> int:
    r = numerical_rank(s)
    if r == 0:
        return 1
    sq = np.asarray(s, dtype=DTYPE) ** 2
    cum = np.cumsum(sq)
    # relative slack so energy=1.0 is met by the numerical rank despite rounding
    need = energy * cum[-1] * (1.0 - 1e-12)
    k = int(np.searchsorted(cum, need, side="left")) + 1
    return max(1, min(k, r))


def rank_constrain_model(model: Model, plan: FactorizationPlan, svd_fn: SvdFn = svd) -> Model:
    """Replace each planned conv with ``[V conv, H conv, BatchNorm]``.

    V has no bias; the original bias moves to H.  The BatchNorm starts as an
    exact identity in eval mode.  1x1 convolutions are left untouched.
    """
    plan.validate(model)
    model = model.copy()
    layers = []
    for idx, layer in enumerate(model.layers):
        if idx not in plan.ranks:
            layers.append(layer)
            continue
        if not _factorizable(layer):
            log.info("layer %d has a 1x1 kernel; left unfactorized", idx)
            layers.append(layer)
            continue
        pair = factorize_layer(layer.params["weight"], plan.ranks[idx], svd_fn)
        layers.append(Conv2d(pair.v_kernel))
        layers.append(Conv2d(pair.h_kernel, layer.params.get("bias")))
        layers.append(pair.h_batchnorm)
    return Model(layers, model.input_shape, model.num_classes)


def factorized_param_count(c: int, d: int, n: int, k: int, bias: bool = True,
                           batchnorm: bool = True) -> int:
    return c * d * k + k * d * n + (n if bias else 0) + (2 * n if batchnorm else 0)

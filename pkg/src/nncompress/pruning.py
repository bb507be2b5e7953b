"""Magnitude pruning with persistent masks and the cubic gradual-sparsity schedule.

A mask is a ``dict`` from parameter key (``"<layer>.weight"``) to a boolean
array of the weight's shape, ``True`` meaning the weight is kept.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .errors import DimensionError, ParameterError
from .nn.model import Model
from .nn.train import TrainConfig, train

if TYPE_CHECKING:
    from .harness.data import Dataset

PruneMask = dict[str, np.ndarray]


@dataclass(frozen=True)
class SparsitySchedule:
    """Cubic ramp from ``s_i`` to ``s_f`` over ``n`` pruning events ``delta_t`` steps apart."""

    s_i: float = 0.0
    s_f: float = 0.75
    t0: int = 0
    delta_t: int = 100
    n: int = 10

    def __post_init__(self):
        if not 0.0 <= self.s_i < 1.0:
            raise ParameterError(f"s_i must lie in [0, 1), got {self.s_i}")
        if not 0.0 < self.s_f <= 1.0:
            raise ParameterError(f"s_f must lie in (0, 1], got {self.s_f}")
        if self.s_f < self.s_i:
            raise ParameterError(f"s_f ({self.s_f}) must be >= s_i ({self.s_i})")
        if self.t0 < 0 or self.delta_t < 1 or self.n < 1:
            raise ParameterError("need t0 >= 0, delta_t >= 1 and n >= 1")

    @property
    def end(self) -> int:
        return self.t0 + self.n * self.delta_t

    def domain(self) -> list[int]:
        return [self.t0 + k * self.delta_t for k in range(self.n + 1)]

    def is_event(self, t: int) -> bool:
        return self.t0 <= t <= self.end and (t - self.t0) % self.delta_t == 0

    def __call__(self, t: int) -> float:
        return schedule_sparsity(self, t)


def schedule_sparsity(sched: SparsitySchedule, t: int) -> float:
    """Target sparsity at pruning event ``t``: ``s_f + (s_i - s_f) * (1 - (t - t0) / (n dt))**3``."""
    if not sched.is_event(t):
        raise ParameterError(f"step {t} is not a pruning event of {sched}")
    progress = (t - sched.t0) / (sched.n * sched.delta_t)
    return sched.s_f + (sched.s_i - sched.s_f) * (1.0 - progress) ** 3


def prune_count(target_sparsity: float, numel: int) -> int:
    # the epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    return min(numel, math.floor(target_sparsity * numel + 1e-9))


def magnitude_prune(weights: np.ndarray, target_sparsity: float,
                    existing: np.ndarray | None = None) -> np.ndarray:
    """Mask that zeroes the ``floor(target * numel)`` smallest-magnitude weights.

    Entries already pruned in ``existing`` stay pruned and are counted first;
    equal magnitudes are pruned in increasing flat-index order.
    """
    if not 0.0 <= target_sparsity <= 1.0:
        raise ParameterError(f"target sparsity must lie in [0, 1], got {target_sparsity}")
    w = np.asarray(weights)
    k = prune_count(target_sparsity, w.size)
    score = np.abs(w).reshape(-1).astype(np.float64)
    if existing is not None:
        existing = np.asarray(existing, dtype=bool)
        if existing.shape != w.shape:
            raise DimensionError(f"mask shape {existing.shape} != weight shape {w.shape}")
        already = int(existing.size - np.count_nonzero(existing))
        if already > k:
            raise ParameterError(
                f"target sparsity {target_sparsity} keeps more weights than the existing mask "
                f"({already}/{w.size} already pruned); pruning is monotone")
        score[~existing.reshape(-1)] = -1.0
    order = np.argsort(score, kind="stable")
    keep = np.ones(w.size, dtype=bool)
    keep[order[:k]] = False
    return keep.reshape(w.shape)


def apply_mask(model: Model, mask: PruneMask) -> Model:
    """Set masked-out weights to exactly 0.0 in place; returns ``model``."""
    for key, m in mask.items():
        w = model.get(key)
        if m.shape != w.shape:
            raise DimensionError(f"{key}: mask shape {m.shape} != weight shape {w.shape}")
        w[~m] = 0.0
    return model


def full_mask(model: Model, keys=None) -> PruneMask:
    keys = model.weight_keys() if keys is None else keys
    return {k: np.ones(model.get(k).shape, dtype=bool) for k in keys}


def mask_sparsity(mask: PruneMask) -> dict[str, float]:
    return {k: 1.0 - np.count_nonzero(m) / m.size for k, m in mask.items()}


def prune_model(model: Model, sparsity: float, mask: PruneMask | None = None,
                keys=None) -> PruneMask:
    """One pruning event across all prunable layers; mutates ``model``."""
    mask = full_mask(model, keys) if mask is None else mask
    new = {k: magnitude_prune(model.get(k), sparsity, mask.get(k)) for k in mask}
    apply_mask(model, new)
    return new


@dataclass
class PruneResult:
    model: Model
    mask: PruneMask
    losses: list[float]
    #: scheduled sparsity in force after each step (held between events)
    target_trace: list[float]
    #: measured per-layer sparsity after each step
    sparsity_trace: dict[str, list[float]]
    #: (step, scheduled sparsity) for every pruning event
    events: list[tuple[int, float]] = field(default_factory=list)
    mask_history: list[PruneMask] = field(default_factory=list)


class _Recorder:
    def __init__(self, keys):
        self.targets: list[float] = []
        self.layers: dict[str, list[float]] = {k: [] for k in keys}

    def record(self, target: float, mask: PruneMask):
        self.targets.append(target)
        for k, s in mask_sparsity(mask).items():
            self.layers[k].append(s)


def gradual_prune_train(model: Model, data: Dataset, cfg: TrainConfig, sched: SparsitySchedule,
                        keys=None, keep_history: bool = False) -> PruneResult:
    """Train while pruning to ``sched`` at each of its events.

    Step numbers count completed updates; an event at ``t0 = 0`` fires on the
    starting weights before the first update.  After every update the current
    mask is re-applied so pruned weights remain exactly zero.
    """
    if cfg.steps < sched.end:
        raise ParameterError(f"schedule ends at step {sched.end} but training runs {cfg.steps} steps")
    model = model.copy()
    keys = model.weight_keys() if keys is None else list(keys)
    state = {"mask": full_mask(model, keys), "target": 0.0}
    events: list[tuple[int, float]] = []
    history: list[PruneMask] = []
    rec = _Recorder(keys)

    def prune_event(t: int, m: Model):
        s = schedule_sparsity(sched, t)
        state["mask"] = prune_model(m, s, state["mask"])
        state["target"] = s
        events.append((t, s))
        if keep_history:
            history.append({k: v.copy() for k, v in state["mask"].items()})

    if sched.t0 == 0:
        prune_event(0, model)

    def gradual_pruning_hook(step: int, m: Model):
        if step > 0 and sched.is_event(step):
            prune_event(step, m)
        else:
            apply_mask(m, state["mask"])
        rec.record(state["target"], state["mask"])

    result = train(model, data, cfg, hooks=[gradual_pruning_hook])
    return PruneResult(result.model, state["mask"], result.losses, rec.targets, rec.layers,
                       events, history)


def one_shot_prune_train(model: Model, data: Dataset, cfg: TrainConfig, s_f: float,
                         keys=None) -> PruneResult:
    """Prune to ``s_f`` before the first update, then train with the mask held fixed."""
    model = model.copy()
    keys = model.weight_keys() if keys is None else list(keys)
    mask = prune_model(model, s_f, full_mask(model, keys))
    rec = _Recorder(keys)

    def mask_hook(step: int, m: Model):
        apply_mask(m, mask)
        rec.record(s_f, mask)

    result = train(model, data, cfg, hooks=[mask_hook])
    return PruneResult(result.model, mask, result.losses, rec.targets, rec.layers,
                       [(0, s_f)], [])

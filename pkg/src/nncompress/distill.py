"""Knowledge distillation: temperature softmax, cached teacher targets, mixed loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .nn.model import Model
from .nn.train import TrainConfig, TrainResult, cross_entropy, log_softmax, predict, train

if TYPE_CHECKING:
    from .harness.data import Dataset


@dataclass(frozen=True)
class DistillConfig:
    """``soft_weight`` multiplies the soft-target term; ``1 - soft_weight`` the hard-label term."""

    temperature: float = 4.0
    soft_weight: float = 0.5
    teacher: Model | None = None

    def __post_init__(self):
        if self.temperature < 1:
            raise ParameterError(f"temperature must be >= 1, got {self.temperature}")
        if not 0.0 <= self.soft_weight <= 1.0:
            raise ParameterError(f"soft_weight must lie in [0, 1], got {self.soft_weight}")


@dataclass
class SoftTargets:
    probs: np.ndarray
    temperature: float

    def __len__(self):
        return len(self.probs)


def soften(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise ``exp(z_i / T) / sum_j exp(z_j / T)``, shifted by the row max for safety."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64)) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def generate_soft_targets(teacher: Model, data: Dataset, temperature: float,
                          path=None) -> SoftTargets:
    """Teacher probabilities at ``temperature`` for every example, optionally cached to ``path``."""
    soft = SoftTargets(soften(predict(teacher, data.images), temperature), float(temperature))
    if path is not None:
        from .harness.serialize import save_soft_targets
        save_soft_targets(soft, path)
    return soft


def kd_loss(student_logits: np.ndarray, soft: np.ndarray, hard_labels,
            cfg: DistillConfig) -> tuple[float, np.ndarray]:
    """``lam * T^2 * KL(soft || softmax(z / T)) + (1 - lam) * CE(z, labels)``, batch-averaged.

    Returns the loss and its exact gradient with respect to ``student_logits``.
    """
    z = np.asarray(student_logits, dtype=np.float64)
    p = np.asarray(soft, dtype=np.float64)
    if p.shape != z.shape:
        raise DimensionError(f"soft targets {p.shape} do not match student logits {z.shape}")
    lam, t = cfg.soft_weight, cfg.temperature
    b = z.shape[0]
    loss, grad = 0.0, np.zeros_like(z)
    if lam > 0:
        log_q = log_softmax(z / t)
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        kl = (plogp - p * log_q).sum(axis=1).mean()
        loss += lam * t * t * kl
        grad += lam * t * (np.exp(log_q) - p) / b
    if lam < 1:
        ce, ce_grad = cross_entropy(z, hard_labels)
        loss += (1.0 - lam) * ce
        grad += (1.0 - lam) * ce_grad
    return float(loss), grad


def distill_train(student: Model, data: Dataset, soft: SoftTargets, cfg: TrainConfig,
                  dcfg: DistillConfig) -> TrainResult:
    """Train ``student`` with :func:`kd_loss` against cached teacher targets."""
    if len(soft) != len(data):
        raise DataError(f"soft targets cover {len(soft)} examples, dataset has {len(data)}")
    if soft.probs.shape[1] != student.num_classes:
        raise DimensionError(f"soft targets have {soft.probs.shape[1]} classes, "
                             f"student emits {student.num_classes}")
    if not np.isclose(soft.temperature, dcfg.temperature):
        raise ParameterError(f"soft targets were made at T={soft.temperature}, "
                             f"config asks for T={dcfg.temperature}")

    def loss_fn(logits, labels, idx):
        return kd_loss(logits, soft.probs[idx], labels, dcfg)

    return train(student, data, cfg, loss_fn=loss_fn)

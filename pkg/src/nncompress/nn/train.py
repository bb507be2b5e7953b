"""Loss, SGD update, minibatch training loop and accuracy evaluation."""
from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from ..errors import ParameterError, StateError, NumericError, TrainingError
from ..tensor import DTYPE, Rng
from .model import Model, backward, clear_caches, forward

if TYPE_CHECKING:
    from ..harness.data import Dataset

log = logging.getLogger(__name__)

Hook = Callable[[int, Model], None]
LossFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    steps: int = 100
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")


class TrainResult(NamedTuple):
    model: Model
    losses: list[float]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _label_indices(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels.argmax(axis=1)
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    return labels


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient with respect to the logits.

    ``labels`` are class indices or one-hot rows.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    if not np.all(np.isfinite(logits)):
        raise NumericError("cross_entropy received non-finite logits")
    b, n = logits.shape
    idx = _label_indices(labels, n)
    logp = log_softmax(logits)
    loss = -logp[np.arange(b), idx].mean()
    grad = np.exp(logp)
    grad[np.arange(b), idx] -= 1.0
    return float(loss), grad / b


def sgd_step(model: Model, grads: dict[str, np.ndarray], cfg: TrainConfig) -> Model:
    """In-place descent update ``w <- w - lr * (grad + weight_decay * w)``; returns ``model``."""
    params = model.params()
    if set(params) != set(grads):
        raise StateError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    lr, wd = cfg.learning_rate, cfg.weight_decay
    for key, w in params.items():
        g = grads[key] if wd == 0 else grads[key] + wd * w
        w -= lr * g
    return model


class BatchSampler:
    """Epoch-wise shuffled minibatch indices; a short tail batch is skipped."""

    def __init__(self, n: int, batch_size: int, rng: Rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def train(model: Model, data: Dataset, cfg: TrainConfig, hooks: Sequence[Hook] = (),
          loss_fn: LossFn | None = None) -> TrainResult:
    """Run ``cfg.steps`` minibatch SGD steps on a copy of ``model``.

    Each hook is called as ``hook(step, model)`` after every update, where
    ``step`` counts completed updates starting at 1.  ``loss_fn`` defaults to
    cross-entropy and receives ``(logits, labels, example_indices)``.
    """
    if len(data) == 0:
        raise ParameterError("cannot train on an empty dataset")
    model = model.copy()
    if loss_fn is None:
        def loss_fn(logits, labels, _idx):
            return cross_entropy(logits, labels)
    sampler = BatchSampler(len(data), cfg.batch_size, Rng(cfg.seed))
    losses: list[float] = []
    for step in range(1, cfg.steps + 1):
        idx = sampler.next()
        xb = data.images[idx]
        logits = forward(model, xb, train=True)
        loss, grad = loss_fn(logits, data.labels[idx], idx)
        if not np.isfinite(loss):
            raise NumericError(f"loss became non-finite at step {step}")
        grads = backward(model, xb, grad)
        sgd_step(model, grads, cfg)
        losses.append(float(loss))
        for hook in hooks:
            try:
                hook(step, model)
            except Exception as exc:
                name = getattr(hook, "__name__", type(hook).__name__)
                raise TrainingError(f"hook {name!r} failed at step {step}: {exc}") from exc
    clear_caches(model)
    return TrainResult(model, losses)


def predict(model: Model, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits for ``images``, computed in chunks."""
    out = [forward(model, images[i:i + batch_size], train=False)
           for i in range(0, len(images), batch_size)]
    clear_caches(model)
    if not out:
        return np.zeros((0, model.num_classes))
    return np.concatenate(out, axis=0)


def evaluate(model: Model, data: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy; ties in the logits resolve to the lowest class index."""
    if len(data) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    pred = predict(model, data.images, batch_size).argmax(axis=1)
    return float(np.mean(pred == data.labels))

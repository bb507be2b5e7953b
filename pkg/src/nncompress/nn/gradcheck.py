"""Central finite-difference checks for model and loss gradients."""
from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .model import Model, backward, forward
from .train import cross_entropy


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps gradients that are zero in exact arithmetic (a bias feeding
    a train-mode BatchNorm) from comparing rounding noise against itself.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check_model_gradients(model: Model, x: np.ndarray, labels: np.ndarray,
                          train: bool = False, eps: float = 1e-5) -> dict[str, float]:
    """Relative error between backprop and finite differences, per parameter tensor.

    The key ``"input"`` holds the error of the gradient with respect to ``x``.
    Running statistics are snapshotted and restored around every evaluation so
    train-mode BatchNorm stays a pure function of the parameters.
    """
    buffers = [{k: v.copy() for k, v in layer.buffers.items()} for layer in model.layers]

    def restore():
        for layer, saved in zip(model.layers, buffers):
            for k, v in saved.items():
                layer.buffers[k] = v.copy()

    def loss() -> float:
        value = cross_entropy(forward(model, x, train=train), labels)[0]
        restore()
        return value

    logits = forward(model, x, train=train)
    _, g = cross_entropy(logits, labels)
    restore()
    # backprop from the logit gradient, then recover the input gradient too
    grads = backward(model, x, g)
    dx = g
    for layer in reversed(model.layers):
        dx, _ = layer.backward(dx)
    errors = {key: rel_error(grads[key], numeric_grad(loss, param, eps))
              for key, param in model.named_params()}
    errors["input"] = rel_error(dx, numeric_grad(loss, x, eps))
    return errors

"""Sequential model container and the whole-model forward/backward passes."""
from __future__ import annotations

import copy
from collections.abc import Iterator

import numpy as np

from ..errors import DimensionError, StateError
from ..tensor import DTYPE
from .layers import Conv2d, Dense, Layer


class Model:
    """An ordered stack of layers with parameters addressed as ``"<index>.<name>"``."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int], num_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self._cached_batch = None
        if self.layers:
            out = self.output_shape()
            if out != (self.num_classes,):
                raise DimensionError(f"model emits {out}, expected ({self.num_classes},) logits")

    def output_shape(self) -> tuple[int, ...]:
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                if name in layer.params:
                    yield f"{i}.{name}", layer.params[name]

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.named_params())

    def get(self, key: str) -> np.ndarray:
        idx, name = key.split(".", 1)
        return self.layers[int(idx)].params[name]

    def set(self, key: str, value: np.ndarray):
        idx, name = key.split(".", 1)
        layer = self.layers[int(idx)]
        if layer.params[name].shape != value.shape:
            raise DimensionError(f"{key}: shape {value.shape} != {layer.params[name].shape}")
        layer.params[name] = value

    def weight_keys(self) -> list[str]:
        """Keys of conv and dense weight tensors, in layer order."""
        return [f"{i}.weight" for i, layer in enumerate(self.layers)
                if isinstance(layer, (Conv2d, Dense))]

    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def __deepcopy__(self, memo):
        new = Model.__new__(Model)
        new.layers = [copy.deepcopy(layer, memo) for layer in self.layers]
        new.input_shape = self.input_shape
        new.num_classes = self.num_classes
        new._cached_batch = None
        return new

    def __repr__(self):
        body = "\n  ".join(repr(layer) for layer in self.layers)
        return f"Model(input={self.input_shape}, classes={self.num_classes},\n  {body})"


def forward(model: Model, batch: np.ndarray, train: bool = False) -> np.ndarray:
    """Run the layers in order and return ``(batch, num_classes)`` logits."""
    x = np.asarray(batch, dtype=DTYPE)
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise DimensionError(f"expected batch of shape (B, {model.input_shape}), got {x.shape}")
    for layer in model.layers:
        x = layer.forward(x, train=train)
    model._cached_batch = batch.shape[0]
    return x


def backward(model: Model, batch: np.ndarray, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate ``grad_logits`` through the activations cached by the last forward."""
    if model._cached_batch is None:
        raise StateError("backward called before forward")
    if batch.shape[0] != model._cached_batch or grad_logits.shape != (model._cached_batch, model.num_classes):
        raise StateError("backward batch does not match the cached forward pass")
    grads: dict[str, np.ndarray] = {}
    g = np.asarray(grad_logits, dtype=DTYPE)
    for i in range(len(model.layers) - 1, -1, -1):
        g, layer_grads = model.layers[i].backward(g)
        for name, value in layer_grads.items():
            grads[f"{i}.{name}"] = value
    return {k: grads[k] for k, _ in model.named_params()}


def clear_caches(model: Model):
    model._cached_batch = None
    for layer in model.layers:
        layer.clear_cache()

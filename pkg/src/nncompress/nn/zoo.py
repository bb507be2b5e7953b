"""Model builders: a layer-spec interpreter plus the desk-scale presets.

A layer spec is a list of dicts such as ``{"type": "conv", "out": 16}``;
``"out": "classes"`` stands for the number of classes.
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from ..tensor import Rng
from .layers import BatchNorm, Conv2d, Dense, Flatten, MaxPool2x2, ReLU
from .model import Model

PRESETS: dict[str, list[dict]] = {
    # VGG-style teacher, ~193k parameters on 1x28x28 input
    "tiny_vgg": [
        {"type": "conv", "out": 16}, {"type": "relu"},
        {"type": "conv", "out": 16}, {"type": "relu"}, {"type": "pool"},
        {"type": "conv", "out": 32}, {"type": "relu"},
        {"type": "conv", "out": 32}, {"type": "relu"}, {"type": "pool"},
        {"type": "flatten"},
        {"type": "dense", "out": 112}, {"type": "relu"},
        {"type": "dense", "out": "classes"},
    ],
    # ~52k parameters on 1x28x28 input; the pruning workhorse
    "small_cnn": [
        {"type": "conv", "out": 8}, {"type": "relu"}, {"type": "pool"},
        {"type": "conv", "out": 16}, {"type": "relu"}, {"type": "pool"},
        {"type": "flatten"},
        {"type": "dense", "out": 64}, {"type": "relu"},
        {"type": "dense", "out": "classes"},
    ],
    # two conv layers and one hidden layer, ~20k parameters on 1x28x28 input
    "snn_student": [
        {"type": "conv", "out": 4}, {"type": "relu"}, {"type": "pool"},
        {"type": "conv", "out": 8}, {"type": "relu"}, {"type": "pool"},
        {"type": "flatten"},
        {"type": "dense", "out": 48}, {"type": "relu"},
        {"type": "dense", "out": "classes"},
    ],
    # the same plus an extra small hidden layer before the output
    "cnn_student": [
        {"type": "conv", "out": 4}, {"type": "relu"}, {"type": "pool"},
        {"type": "conv", "out": 8}, {"type": "relu"}, {"type": "pool"},
        {"type": "flatten"},
        {"type": "dense", "out": 48}, {"type": "relu"},
        {"type": "dense", "out": 24}, {"type": "relu"},
        {"type": "dense", "out": "classes"},
    ],
    "mlp": [
        {"type": "flatten"},
        {"type": "dense", "out": 64}, {"type": "relu"},
        {"type": "dense", "out": "classes"},
    ],
    "linear": [
        {"type": "flatten"},
        {"type": "dense", "out": "classes"},
    ],
}


def build_model(spec: str | list[dict], input_shape, num_classes: int, rng: Rng) -> Model:
    """Instantiate a preset name or explicit layer spec with He-normal weights."""
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ConfigError(f"unknown architecture {spec!r}; presets: {sorted(PRESETS)}")
        spec = PRESETS[spec]
    shape = tuple(input_shape)
    layers = []
    for entry in spec:
        kind = entry.get("type")
        out = entry.get("out")
        if out == "classes":
            out = num_classes
        if kind == "conv":
            layer = Conv2d.init(rng, shape[0], int(out), entry.get("kernel", 3),
                                bias=entry.get("bias", True))
        elif kind == "dense":
            layer = Dense.init(rng, shape[0], int(out), bias=entry.get("bias", True))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "pool":
            layer = MaxPool2x2()
        elif kind == "flatten":
            layer = Flatten()
        elif kind == "batchnorm":
            layer = BatchNorm.identity(shape[0], entry.get("momentum", 0.1), entry.get("eps", 1e-5))
            layer.buffers["running_var"] = np.ones(shape[0])
        else:
            raise ConfigError(f"unknown layer type {kind!r}")
        try:
            shape = layer.output_shape(shape)
        except Exception as exc:
            raise ConfigError(f"layer {len(layers)} ({kind}) does not fit input {shape}: {exc}") from exc
        layers.append(layer)
    return Model(layers, input_shape, num_classes)

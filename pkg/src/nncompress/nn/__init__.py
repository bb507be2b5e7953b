"""Minimal numpy training engine: layers, sequential models, SGD."""
from .layers import BatchNorm, Conv2d, Dense, Flatten, Layer, MaxPool2x2, ReLU
from .model import Model, backward, clear_caches, forward
from .train import (
    TrainConfig,
    TrainResult,
    cross_entropy,
    evaluate,
    log_softmax,
    predict,
    sgd_step,
    softmax,
    train,
)
from .zoo import PRESETS, build_model

__all__ = [
    "BatchNorm", "Conv2d", "Dense", "Flatten", "Layer", "MaxPool2x2", "ReLU",
    "Model", "backward", "clear_caches", "forward",
    "TrainConfig", "TrainResult", "cross_entropy", "evaluate", "log_softmax",
    "predict", "sgd_step", "softmax", "train",
    "PRESETS", "build_model",
]

import numpy as np
import pytest

from nncompress.harness.data import synthetic_split
from nncompress.nn import build_model
from nncompress.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def blobs():
    """4-class 1x8x8 blobs, 256 train / 128 test."""
    return synthetic_split(7, 256, 128, classes=4, shape=(1, 8, 8), noise=0.2)


@pytest.fixture
def tiny_cnn(rng):
    spec = [
        {"type": "conv", "out": 4}, {"type": "relu"}, {"type": "pool"},
        {"type": "flatten"},
        {"type": "dense", "out": 16}, {"type": "relu"},
        {"type": "dense", "out": "classes"},
    ]
    return build_model(spec, (1, 8, 8), 4, rng)


def max_rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))

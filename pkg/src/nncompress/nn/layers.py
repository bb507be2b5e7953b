"""Layer kernels with hand-written forward and backward passes.

Activations are laid out ``(batch, channels, height, width)``.  Conv2d
weights use the ``(C_in, kh, kw, N_out)`` layout, so a square kernel is the
``C x d x d x N`` tensor that :mod:`nncompress.lowrank` matricizes.
"""
from __future__ import annotations

import copy

import numpy as np

from ..errors import DimensionError, ParameterError, StateError
from ..tensor import DTYPE, Rng, rand_normal


class Layer:
    kind: str = ""
    #: parameter names in serialization order
    param_names: tuple[str, ...] = ()
    #: non-trainable state (e.g. BatchNorm running statistics)
    buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def hyper(self) -> dict:
        return {}

    def clear_cache(self):
        self._cache = None

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}.backward called without a cached forward pass")
        return self._cache

    def __deepcopy__(self, memo):
        new = copy.copy(self)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.buffers = {k: v.copy() for k, v in self.buffers.items()}
        new._cache = None
        return new

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


class Conv2d(Layer):
    """Stride-1 cross-correlation with zero padding that preserves spatial size."""

    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        weight = np.asarray(weight, dtype=DTYPE)
        if weight.ndim != 4:
            raise DimensionError(f"conv weight must be rank 4 (C, kh, kw, N), got {weight.shape}")
        self.params["weight"] = weight
        if bias is not None:
            bias = np.asarray(bias, dtype=DTYPE)
            if bias.shape != (weight.shape[3],):
                raise DimensionError(f"conv bias shape {bias.shape} != ({weight.shape[3]},)")
            self.params["bias"] = bias

    @classmethod
    def init(cls, rng: Rng, c_in: int, c_out: int, kernel=3, bias: bool = True) -> Conv2d:
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        fan_in = c_in * kh * kw
        w = rand_normal(rng, (c_in, kh, kw, c_out), 0.0, np.sqrt(2.0 / fan_in))
        return cls(w, np.zeros(c_out) if bias else None)

    @property
    def in_channels(self) -> int:
        return self.params["weight"].shape[0]

    @property
    def out_channels(self) -> int:
        return self.params["weight"].shape[3]

    @property
    def kernel_size(self) -> tuple[int, int]:
        w = self.params["weight"]
        return w.shape[1], w.shape[2]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise DimensionError(f"conv expects {self.in_channels} input channels, got {c}")
        return (self.out_channels, h, w)

    def _pads(self):
        kh, kw = self.kernel_size
        return (kh // 2, kh - 1 - kh // 2), (kw // 2, kw - 1 - kw // 2)

    def _im2col(self, x):
        """Columns of shape (C*kh*kw, B*H*W) from one slice copy per kernel offset."""
        kh, kw = self.kernel_size
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), *self._pads()))
        cols = np.empty((c, kh, kw, b, h, w), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
        return cols.reshape(c * kh * kw, b * h * w)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"conv expects (B, {self.in_channels}, H, W) input, got {x.shape}")
        b, _, h, w = x.shape
        cols = self._im2col(x)
        out = self.params["weight"].reshape(-1, self.out_channels).T @ cols
        if "bias" in self.params:
            out += self.params["bias"][:, None]
        self._cache = (x.shape, cols)
        return out.reshape(self.out_channels, b, h, w).transpose(1, 0, 2, 3)

    def backward(self, grad):
        x_shape, cols = self._need_cache()
        b, c, h, w = x_shape
        kh, kw = self.kernel_size
        weight = self.params["weight"]
        g = grad.transpose(1, 0, 2, 3).reshape(self.out_channels, b * h * w)
        grads = {"weight": (cols @ g.T).reshape(weight.shape)}
        if "bias" in self.params:
            grads["bias"] = g.sum(axis=1)
        dcols = (weight.reshape(-1, self.out_channels) @ g).reshape(c, kh, kw, b, h, w)
        (pt, _), (pl, _) = self._pads()
        dxp = np.zeros((c, b, h + kh - 1, w + kw - 1), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
        return dxp[:, :, pt:pt + h, pl:pl + w].transpose(1, 0, 2, 3), grads

    def hyper(self):
        return {"kernel": list(self.kernel_size), "bias": "bias" in self.params}


class Dense(Layer):
    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        super().__init__()
        weight = np.asarray(weight, dtype=DTYPE)
        if weight.ndim != 2:
            raise DimensionError(f"dense weight must be rank 2 (in, out), got {weight.shape}")
        self.params["weight"] = weight
        if bias is not None:
            bias = np.asarray(bias, dtype=DTYPE)
            if bias.shape != (weight.shape[1],):
                raise DimensionError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
            self.params["bias"] = bias

    @classmethod
    def init(cls, rng: Rng, n_in: int, n_out: int, bias: bool = True) -> Dense:
        w = rand_normal(rng, (n_in, n_out), 0.0, np.sqrt(2.0 / n_in))
        return cls(w, np.zeros(n_out) if bias else None)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.params["weight"].shape[0],):
            raise DimensionError(
                f"dense expects input ({self.params['weight'].shape[0]},), got {tuple(in_shape)}")
        return (self.params["weight"].shape[1],)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.params["weight"].shape[0]:
            raise DimensionError(f"dense expects (B, {self.params['weight'].shape[0]}), got {x.shape}")
        self._cache = x
        out = x @ self.params["weight"]
        if "bias" in self.params:
            out = out + self.params["bias"]
        return out

    def backward(self, grad):
        x = self._need_cache()
        grads = {"weight": x.T @ grad}
        if "bias" in self.params:
            grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"].T, grads

    def hyper(self):
        return {"bias": "bias" in self.params}


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad):
        mask = self._need_cache()
        return np.where(mask, grad, 0.0), {}


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; an odd trailing row/column is dropped."""

    kind = "maxpool2x2"

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise DimensionError(f"maxpool needs spatial size >= 2, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        blocks = x[:, :, :2 * ho, :2 * wo].reshape(b, c, ho, 2, wo, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
        # first maximum in row-major window order receives the gradient
        arg = blocks.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        x_shape, arg = self._need_cache()
        b, c, h, w = x_shape
        ho, wo = h // 2, w // 2
        onehot = (arg[..., None] == np.arange(4)) * grad[..., None]
        blocks = onehot.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=DTYPE)
        dx[:, :, :2 * ho, :2 * wo] = blocks.reshape(b, c, 2 * ho, 2 * wo)
        return dx, {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        shape = self._need_cache()
        return grad.reshape(shape), {}


class BatchNorm(Layer):
    """Per-channel batch normalization for (B, C, H, W) or (B, C) inputs.

    Train mode normalizes with batch statistics and updates the running
    estimates with ``momentum``; eval mode uses the running estimates.
    """

    kind = "batchnorm"
    param_names = ("scale", "shift")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, scale, shift, running_mean, running_var, momentum=0.1, eps=1e-5):
        super().__init__()
        self.params["scale"] = np.asarray(scale, dtype=DTYPE)
        self.params["shift"] = np.asarray(shift, dtype=DTYPE)
        self.buffers["running_mean"] = np.asarray(running_mean, dtype=DTYPE)
        self.buffers["running_var"] = np.asarray(running_var, dtype=DTYPE)
        n = self.params["scale"].shape
        for name, arr in (*self.params.items(), *self.buffers.items()):
            if arr.shape != n or arr.ndim != 1:
                raise DimensionError(f"batchnorm {name} has shape {arr.shape}, expected {n}")
        if np.any(self.buffers["running_var"] <= 0):
            raise ParameterError("batchnorm running variance must be positive")
        self.momentum = float(momentum)
        self.eps = float(eps)

    @classmethod
    def identity(cls, channels: int, momentum=0.1, eps=1e-5) -> BatchNorm:
        """A BatchNorm whose eval-mode transform is exactly the identity.

        ``running_var = 1 - eps`` makes ``sqrt(var + eps) == 1``.
        """
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.full(channels, 1.0 - eps), momentum, eps)

    @property
    def channels(self) -> int:
        return self.params["scale"].shape[0]

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise DimensionError(f"batchnorm expects {self.channels} channels, got {in_shape[0]}")
        return tuple(in_shape)

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, train=False):
        axes, bs = self._axes(x), self._bshape(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            count = x.size // self.channels
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            unbiased = var * count / max(count - 1, 1)
            self.buffers["running_mean"] = (1 - self.momentum) * rm + self.momentum * mean
            self.buffers["running_var"] = (1 - self.momentum) * rv + self.momentum * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        self._cache = (xhat, inv_std, train)
        return xhat * self.params["scale"].reshape(bs) + self.params["shift"].reshape(bs)

    def backward(self, grad):
        xhat, inv_std, train = self._need_cache()
        axes, bs = self._axes(grad), self._bshape(grad)
        grads = {"scale": (grad * xhat).sum(axis=axes), "shift": grad.sum(axis=axes)}
        dxhat = grad * self.params["scale"].reshape(bs)
        if not train:
            return dxhat * inv_std.reshape(bs), grads
        count = grad.size // self.channels
        dx = (count * dxhat - dxhat.sum(axis=axes, keepdims=True)
              - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx * (inv_std.reshape(bs) / count), grads

    def hyper(self):
        return {"momentum": self.momentum, "eps": self.eps}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, Dense, ReLU, MaxPool2x2, Flatten, BatchNorm)}

"""Layer/parameter primitives and shape-only operations.

All activation tensors are NCHW float arrays. Layers cache whatever their
backward pass needs during forward; one backward per forward.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Param:
    """A learnable array plus its gradient slot."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = data
        self.grad = None

    def __repr__(self):
        return f"Param({self.name}, shape={self.data.shape})"


class Layer:
    """Base class: forward caches, backward consumes the cache."""

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training=training, rng=rng)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class ReLU(Layer):
    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, gy):
        return np.where(self._mask, gy, 0)


class HSwish(Layer):
    """x * relu6(x + 3) / 6."""

    def forward(self, x, training=False, rng=None):
        self._x = x
        return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0

    def backward(self, gy):
        x = self._x
        g = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
        return (gy * g).astype(gy.dtype, copy=False)


class HSigmoid(Layer):
    def forward(self, x, training=False, rng=None):
        self._x = x
        return np.clip(x + 3.0, 0.0, 6.0) / 6.0

    def backward(self, gy):
        inside = (self._x > -3.0) & (self._x < 3.0)
        return np.where(inside, gy / 6.0, 0.0).astype(gy.dtype, copy=False)


def sigmoid(x):
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    def forward(self, x, training=False, rng=None):
        self._y = sigmoid(x)
        return self._y

    def backward(self, gy):
        return (gy * self._y * (1.0 - self._y)).astype(gy.dtype, copy=False)


class GlobalAvgPool(Layer):
    """(B,C,H,W) -> (B,C,1,1) spatial mean."""

    def forward(self, x, training=False, rng=None):
        self._hw = x.shape[2] * x.shape[3]
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, gy):
        return np.broadcast_to(gy / self._hw, self._shape).astype(gy.dtype, copy=False)


_ACTIVATIONS = {"relu": ReLU, "hswish": HSwish}


def make_activation(name: str) -> Layer:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# --- bilinear / nearest resizing -------------------------------------------
#
# Bilinear interpolation along one axis is a linear map, so resizing is two
# small matrix products: Y = A_h X A_w^T. The exact transpose gives the
# backward pass for free and both ride BLAS.

_matrix_cache: dict[tuple[int, int], np.ndarray] = {}


def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) bilinear interpolation matrix, half-pixel centers."""
    key = (in_size, out_size)
    mat = _matrix_cache.get(key)
    if mat is None:
        src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
        src = np.clip(src, 0.0, in_size - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, in_size - 1)
        w1 = src - i0
        mat = np.zeros((out_size, in_size), dtype=np.float64)
        rows = np.arange(out_size)
        np.add.at(mat, (rows, i0), 1.0 - w1)
        np.add.at(mat, (rows, i1), w1)
        mat = mat.astype(np.float32)
        _matrix_cache[key] = mat
    return mat


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (..., H, W) bilinearly to (..., out_h, out_w)."""
    if x.ndim < 2:
        raise ShapeError("bilinear_resize expects at least 2 dims")
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x
    ah = resize_matrix(h, out_h).astype(x.dtype, copy=False)
    aw = resize_matrix(w, out_w).astype(x.dtype, copy=False)
    y = np.matmul(ah, x)  # broadcasts over leading dims
    return np.matmul(y, aw.T)


def bilinear_resize_backward(gy: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    out_h, out_w = gy.shape[-2], gy.shape[-1]
    if (in_h, in_w) == (out_h, out_w):
        return gy
    ah = resize_matrix(in_h, out_h).astype(gy.dtype, copy=False)
    aw = resize_matrix(in_w, out_w).astype(gy.dtype, copy=False)
    gx = np.matmul(ah.T, gy)
    return np.matmul(gx, aw)


def nearest_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of (..., H, W); used for masks."""
    h, w = x.shape[-2], x.shape[-1]
    if (h, w) == (out_h, out_w):
        return x
    rows = np.minimum((np.arange(out_h) + 0.5) * (h / out_h), h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * (w / out_w), w - 1).astype(np.int64)
    return x[..., rows[:, None], cols[None, :]]


class BilinearUpsample(Layer):
    """Resize features to a target spatial size decided per forward call."""

    def __init__(self, out_size=None):
        self.out_size = out_size

    def forward(self, x, training=False, rng=None, out_size=None):
        target = out_size or self.out_size
        self._in_hw = (x.shape[2], x.shape[3])
        return bilinear_resize(x, target[0], target[1])

    def backward(self, gy):
        return bilinear_resize_backward(gy, self._in_hw[0], self._in_hw[1])

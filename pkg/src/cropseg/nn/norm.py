"""Normalization layers: batch norm, instance norm, and the IBN split."""

from __future__ import annotations

import numpy as np

from .core import Layer, Param

EPS = 1e-5


class BatchNorm2d(Layer):
    """Standard BN over (B,H,W) per channel with running statistics."""

    def __init__(self, channels, momentum=0.1, eps=EPS, name="bn"):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, training=False, rng=None):
        if training:
            axes = (0, 2, 3)
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (n / max(n - 1, 1))
            self.batch_mean, self.batch_var = mean, var
            self.running_mean += self.momentum * (mean.astype(np.float32) - self.running_mean)
            self.running_var += self.momentum * (unbiased.astype(np.float32) - self.running_var)
            self._n = n
        else:
            mean = self.running_mean
            var = self.running_var
            self._n = 0
        self._invstd = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean.reshape(1, -1, 1, 1)) * self._invstd.reshape(1, -1, 1, 1)
        return (self.gamma.data.reshape(1, -1, 1, 1) * self._xhat
                + self.beta.data.reshape(1, -1, 1, 1)).astype(x.dtype, copy=False)

    def backward(self, gy):
        xhat = self._xhat
        axes = (0, 2, 3)
        self.gamma.grad = (gy * xhat).sum(axis=axes).astype(self.gamma.data.dtype)
        self.beta.grad = gy.sum(axis=axes).astype(self.beta.data.dtype)
        scale = (self.gamma.data * self._invstd).reshape(1, -1, 1, 1)
        if self._n == 0:  # eval: statistics are constants
            gx = gy * scale
        else:
            n = self._n
            gsum = gy.sum(axis=axes, keepdims=True)
            gxhat_sum = (gy * xhat).sum(axis=axes, keepdims=True)
            gx = scale * (gy - gsum / n - xhat * gxhat_sum / n)
        self._xhat = None
        return gx.astype(gy.dtype, copy=False)


def _instance_stats(x, eps):
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    return mean, invstd


class InstanceNorm2d(Layer):
    """Per-sample, per-channel normalization over H,W; same stats in train and eval."""

    def __init__(self, channels, eps=EPS, affine=True, name="in"):
        self.channels = channels
        self.eps = eps
        self.affine = affine
        if affine:
            self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=np.float32))
            self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=np.float32))

    def params(self):
        return [self.gamma, self.beta] if self.affine else []

    def forward(self, x, training=False, rng=None):
        mean, invstd = _instance_stats(x, self.eps)
        self._invstd = invstd
        self._xhat = (x - mean) * invstd
        y = self._xhat
        if self.affine:
            y = self.gamma.data.reshape(1, -1, 1, 1) * y + self.beta.data.reshape(1, -1, 1, 1)
        return y.astype(x.dtype, copy=False)

    def backward(self, gy):
        xhat = self._xhat
        if self.affine:
            self.gamma.grad = (gy * xhat).sum(axis=(0, 2, 3)).astype(self.gamma.data.dtype)
            self.beta.grad = gy.sum(axis=(0, 2, 3)).astype(self.beta.data.dtype)
            gh = gy * self.gamma.data.reshape(1, -1, 1, 1)
        else:
            gh = gy
        n = xhat.shape[2] * xhat.shape[3]
        gsum = gh.sum(axis=(2, 3), keepdims=True)
        gxhat_sum = (gh * xhat).sum(axis=(2, 3), keepdims=True)
        gx = self._invstd * (gh - gsum / n - xhat * gxhat_sum / n)
        self._xhat = None
        return gx.astype(gy.dtype, copy=False)


class IBNNorm(Layer):
    """Half the channels instance-normalized, half batch-normalized, concatenated."""

    def __init__(self, channels, name="ibn"):
        self.channels = channels
        self.split = channels // 2
        self.inorm = InstanceNorm2d(self.split, name=f"{name}.in")
        self.bnorm = BatchNorm2d(channels - self.split, name=f"{name}.bn")

    def params(self):
        return self.inorm.params() + self.bnorm.params()

    def forward(self, x, training=False, rng=None):
        a = self.inorm.forward(x[:, : self.split], training=training)
        b = self.bnorm.forward(x[:, self.split :], training=training)
        return np.concatenate([a, b], axis=1)

    def backward(self, gy):
        ga = self.inorm.backward(np.ascontiguousarray(gy[:, : self.split]))
        gb = self.bnorm.backward(np.ascontiguousarray(gy[:, self.split :]))
        return np.concatenate([ga, gb], axis=1)

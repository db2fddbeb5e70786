"""Feature-statistics operations used to fight low-level style bias.

``unistyle_whiten`` strips per-instance first/second moments from feature
maps (active in train and eval). ``padain_swap`` stochastically transplants
one batch element's channel statistics onto another during training only.
"""

from __future__ import annotations

import numpy as np

from .core import Layer

EPS = 1e-5


def unistyle_whiten(features: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Standardize each (instance, channel) plane of a (B,C,H,W) tensor.

    Subtracts the per-instance per-channel mean and divides by the
    per-instance per-channel std (+eps); no learned affine, so the output is
    invariant to positive per-plane affine transforms of the input.
    """
    x = np.asarray(features)
    if x.ndim < 2:
        raise ValueError("unistyle_whiten expects (..., H, W) feature maps")
    mean = x.mean(axis=(-2, -1), keepdims=True)
    std = np.sqrt(x.var(axis=(-2, -1), keepdims=True))
    return ((x - mean) / (std + eps)).astype(x.dtype, copy=False)


def padain_swap(features: np.ndarray, prob: float, rng: np.random.Generator,
                eps: float = EPS) -> np.ndarray:
    """With probability ``prob``, re-standardize each instance's per-channel
    mean/std to those of a randomly permuted partner in the batch.

    A batch of one has no partner, so a triggered swap degrades to identity.
    Returns the input unchanged (no copy) when the swap does not trigger.
    The denominator is max(std, eps), not std + eps: a swap onto one's own
    statistics must reproduce the input, which an additive guard cannot do.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"prob must be in [0,1], got {prob}")
    x = np.asarray(features)
    if prob == 0.0 or rng.random() >= prob or x.shape[0] < 2:
        return features
    perm = rng.permutation(x.shape[0])
    mean = x.mean(axis=(2, 3), keepdims=True)
    std = np.sqrt(x.var(axis=(2, 3), keepdims=True))
    xhat = (x - mean) / np.maximum(std, eps)
    return (std[perm] * xhat + mean[perm]).astype(features.dtype, copy=False)


class UniStyleWhiten(Layer):
    def __init__(self, eps: float = EPS):
        self.eps = eps

    def forward(self, x, training=False, rng=None):
        mean = x.mean(axis=(2, 3), keepdims=True)
        std = np.sqrt(x.var(axis=(2, 3), keepdims=True))
        self._std = std
        self._s = std + self.eps
        self._centered = x - mean
        return (self._centered / self._s).astype(x.dtype, copy=False)

    def backward(self, gy):
        # y = (x - mu) / (sigma + eps); d sigma / dx_j = (x_j - mu) / (N sigma)
        n = gy.shape[2] * gy.shape[3]
        gmean = gy.mean(axis=(2, 3), keepdims=True)
        t = (gy * self._centered).mean(axis=(2, 3), keepdims=True)
        sigma = np.maximum(self._std, 1e-20)  # centered term is 0 where std is 0
        gx = (gy - gmean) / self._s - self._centered * t / (self._s ** 2 * sigma)
        self._centered = None
        return gx.astype(gy.dtype, copy=False)


class PAdaIN(Layer):
    """Training-only stochastic statistics swap; identity in eval mode.

    Style statistics borrowed from the partner are treated as constants in
    the backward pass; gradient flows through the content standardization.
    """

    def __init__(self, prob: float, eps: float = EPS):
        self.prob = prob
        self.eps = eps

    def forward(self, x, training=False, rng=None):
        self._active = bool(
            training and rng is not None and self.prob > 0.0
            and rng.random() < self.prob and x.shape[0] >= 2
        )
        if not self._active:
            return x
        perm = rng.permutation(x.shape[0])
        mean = x.mean(axis=(2, 3), keepdims=True)
        std = np.sqrt(x.var(axis=(2, 3), keepdims=True))
        self._std = std
        self._s = np.maximum(std, self.eps)
        self._centered = x - mean
        self._style_std = std[perm]
        return (self._style_std * (self._centered / self._s) + mean[perm]).astype(
            x.dtype, copy=False)

    def backward(self, gy):
        if not self._active:
            return gy
        gh = gy * self._style_std
        gmean = gh.mean(axis=(2, 3), keepdims=True)
        t = (gh * self._centered).mean(axis=(2, 3), keepdims=True)
        # the std-dependence term only exists where the max() guard is inactive
        live = self._std > self.eps
        gx = (gh - gmean) / self._s - np.where(
            live, self._centered * t / (self._s ** 3), 0.0)
        self._centered = None
        return gx.astype(gy.dtype, copy=False)

"""Convolution layers.

Dense convolutions run as GEMMs (1x1 bypasses im2col entirely); depthwise
convolutions go through the backend kernels (numba or numpy, see
cropseg.backend).
"""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import ShapeError
from .core import Layer, Param, kaiming_normal


class Conv2d(Layer):
    """Dense 2-D convolution, NCHW, 'same'-style padding by default."""

    def __init__(self, in_ch, out_ch, kernel=1, stride=1, pad=None, dil=1,
                 bias=True, rng=None, name="conv"):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.pad = dil * (kernel - 1) // 2 if pad is None else pad
        self.dil = dil
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        self.weight = Param(f"{name}.weight",
                            kaiming_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Param(f"{name}.bias", np.zeros(out_ch, dtype=np.float32)) if bias else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, training=False, rng=None):
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.weight.name}: expected {self.in_ch} input channels, got {x.shape[1]}")
        b = x.shape[0]
        w2 = self.weight.data.reshape(self.out_ch, -1)
        if self.kernel == 1 and self.pad == 0:
            xs = x[:, :, :: self.stride, :: self.stride] if self.stride > 1 else x
            self._in_hw = (x.shape[2], x.shape[3])
            self._out_hw = (xs.shape[2], xs.shape[3])
            self._cols = np.ascontiguousarray(xs).reshape(b, self.in_ch, -1)
        else:
            cols = kernels.im2col(x, self.kernel, self.kernel, self.stride, self.pad, self.dil)
            self._in_hw = (x.shape[2], x.shape[3])
            self._out_hw = (cols.shape[4], cols.shape[5])
            self._cols = cols.reshape(b, self.in_ch * self.kernel * self.kernel, -1)
        y = np.matmul(w2[None], self._cols)
        if self.bias is not None:
            y += self.bias.data.reshape(1, -1, 1)
        return y.reshape(b, self.out_ch, *self._out_hw)

    def backward(self, gy):
        b = gy.shape[0]
        gy2 = gy.reshape(b, self.out_ch, -1)
        w2 = self.weight.data.reshape(self.out_ch, -1)
        self.weight.grad = np.matmul(gy2, self._cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.weight.data.shape)
        if self.bias is not None:
            self.bias.grad = gy2.sum(axis=(0, 2))
        gcols = np.matmul(w2.T[None], gy2)
        h, w = self._in_hw
        oh, ow = self._out_hw
        if self.kernel == 1 and self.pad == 0:
            gxs = gcols.reshape(b, self.in_ch, oh, ow)
            if self.stride == 1:
                gx = gxs
            else:
                gx = np.zeros((b, self.in_ch, h, w), dtype=gy.dtype)
                gx[:, :, :: self.stride, :: self.stride] = gxs
        else:
            gcols = np.ascontiguousarray(
                gcols.reshape(b, self.in_ch, self.kernel, self.kernel, oh, ow))
            gx = kernels.col2im_add(gcols, h, w, self.stride, self.pad, self.dil)
        self._cols = None
        return gx.astype(gy.dtype, copy=False)


class DepthwiseConv2d(Layer):
    def __init__(self, channels, kernel=3, stride=1, pad=None, dil=1, rng=None, name="dwconv"):
        self.channels = channels
        self.kernel = kernel
        self.stride = stride
        self.pad = dil * (kernel - 1) // 2 if pad is None else pad
        self.dil = dil
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(f"{name}.weight",
                            kaiming_normal(rng, (channels, kernel, kernel), kernel * kernel))
        self.bias = Param(f"{name}.bias", np.zeros(channels, dtype=np.float32))

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, training=False, rng=None):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.weight.name}: expected {self.channels} channels, got {x.shape[1]}")
        self._x = x
        return kernels.depthwise_forward(x, self.weight.data.astype(x.dtype, copy=False),
                                         self.bias.data.astype(x.dtype, copy=False),
                                         self.stride, self.pad, self.dil)

    def backward(self, gy):
        gw, gb = kernels.depthwise_backward_weights(
            self._x, gy, self.kernel, self.kernel, self.stride, self.pad, self.dil)
        self.weight.grad = gw
        self.bias.grad = gb
        gx = kernels.depthwise_backward_input(
            gy, self.weight.data.astype(gy.dtype, copy=False),
            self._x.shape[2], self._x.shape[3], self.stride, self.pad, self.dil)
        self._x = None
        return gx

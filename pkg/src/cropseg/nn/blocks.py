"""Backbone building blocks: conv-norm-act stacks, squeeze-excite,
inverted residuals.
"""

from __future__ import annotations

import numpy as np

from .conv import Conv2d, DepthwiseConv2d
from .core import GlobalAvgPool, HSigmoid, Layer, ReLU, Sequential, Sigmoid, make_activation
from .norm import BatchNorm2d


class ConvNormAct(Sequential):
    def __init__(self, in_ch, out_ch, kernel, stride, norm_factory, act="relu",
                 dil=1, rng=None, name="cna"):
        super().__init__(
            Conv2d(in_ch, out_ch, kernel, stride, dil=dil, bias=False, rng=rng, name=name),
            norm_factory(out_ch, f"{name}.norm"),
            make_activation(act),
        )
        self.out_ch = out_ch


class SqueezeExcite(Layer):
    """Channel attention: pool -> 1x1 reduce -> relu -> 1x1 expand -> gate -> scale."""

    def __init__(self, channels, reduction=4, gate="sigmoid", rng=None, name="se"):
        hidden = max(channels // reduction, 4)
        self.pool = GlobalAvgPool()
        self.fc1 = Conv2d(channels, hidden, 1, rng=rng, name=f"{name}.fc1")
        self.act = ReLU()
        self.fc2 = Conv2d(hidden, channels, 1, rng=rng, name=f"{name}.fc2")
        self.gate = Sigmoid() if gate == "sigmoid" else HSigmoid()

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward(self, x, training=False, rng=None):
        a = self.pool.forward(x)
        a = self.fc1.forward(a)
        a = self.act.forward(a)
        a = self.fc2.forward(a)
        a = self.gate.forward(a)
        self._x = x
        self._a = a
        return x * a

    def backward(self, gy):
        ga = (gy * self._x).sum(axis=(2, 3), keepdims=True)
        gx = gy * self._a
        ga = self.gate.backward(ga)
        ga = self.fc2.backward(ga)
        ga = self.act.backward(ga)
        ga = self.fc1.backward(ga)
        gx = gx + self.pool.backward(ga)
        self._x = None
        self._a = None
        return gx.astype(gy.dtype, copy=False)


class InvertedResidual(Layer):
    """Expand (1x1) -> depthwise -> optional SE -> project (1x1), with a skip
    connection when the spatial size and channel count are preserved."""

    def __init__(self, in_ch, exp_ch, out_ch, kernel, stride, use_se,
                 norm_factory, act="relu", se_gate="sigmoid", dil=1, rng=None, name="ir"):
        self.use_residual = stride == 1 and in_ch == out_ch
        self.out_ch = out_ch
        steps: list[Layer] = []
        if exp_ch != in_ch:
            steps.append(Conv2d(in_ch, exp_ch, 1, bias=False, rng=rng, name=f"{name}.expand"))
            steps.append(norm_factory(exp_ch, f"{name}.expand.norm"))
            steps.append(make_activation(act))
        steps.append(DepthwiseConv2d(exp_ch, kernel, stride, dil=dil, rng=rng, name=f"{name}.dw"))
        steps.append(norm_factory(exp_ch, f"{name}.dw.norm"))
        steps.append(make_activation(act))
        if use_se:
            steps.append(SqueezeExcite(exp_ch, gate=se_gate, rng=rng, name=f"{name}.se"))
        steps.append(Conv2d(exp_ch, out_ch, 1, bias=False, rng=rng, name=f"{name}.project"))
        steps.append(norm_factory(out_ch, f"{name}.project.norm"))
        self.body = Sequential(*steps)

    def params(self):
        return self.body.params()

    def forward(self, x, training=False, rng=None):
        y = self.body.forward(x, training=training, rng=rng)
        return x + y if self.use_residual else y

    def backward(self, gy):
        gx = self.body.backward(gy)
        return gx + gy if self.use_residual else gx


def batchnorm_factory(channels, name):
    return BatchNorm2d(channels, name=name)

"""Two-branch lightweight segmentation head.

Branch 1 applies squeeze-excite-style channel attention to the deep (1/16)
features, upsamples to the mid (1/8) grid and projects to class channels;
branch 2 projects the mid features directly. Their sum is upsampled to the
input resolution. All head convolutions are 1x1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from .conv import Conv2d
from .core import (
    GlobalAvgPool,
    HSigmoid,
    Layer,
    ReLU,
    Sigmoid,
    bilinear_resize,
    bilinear_resize_backward,
)
from .norm import BatchNorm2d

MID_REDUCTION = 8
DEEP_REDUCTION = 16


@dataclass
class FeaturePyramid:
    """Backbone taps: mid at 1/8 spatial reduction, deep at 1/16."""

    mid: np.ndarray
    deep: np.ndarray

    def validate(self, input_hw):
        h, w = input_hw
        if (self.mid.shape[2], self.mid.shape[3]) != (h // MID_REDUCTION, w // MID_REDUCTION):
            raise ShapeError(f"mid features {self.mid.shape} are not at 1/{MID_REDUCTION} of {input_hw}")
        if (self.deep.shape[2], self.deep.shape[3]) != (h // DEEP_REDUCTION, w // DEEP_REDUCTION):
            raise ShapeError(f"deep features {self.deep.shape} are not at 1/{DEEP_REDUCTION} of {input_hw}")


class LRASPPHead(Layer):
    def __init__(self, mid_ch, deep_ch, inter_ch, num_classes, gate="sigmoid",
                 rng=None, name="head"):
        self.num_classes = num_classes
        self.deep_conv = Conv2d(deep_ch, inter_ch, 1, bias=False, rng=rng, name=f"{name}.deep")
        self.deep_norm = BatchNorm2d(inter_ch, name=f"{name}.deep.norm")
        self.deep_act = ReLU()
        self.pool = GlobalAvgPool()
        self.att_conv = Conv2d(deep_ch, inter_ch, 1, rng=rng, name=f"{name}.att")
        self.att_gate = Sigmoid() if gate == "sigmoid" else HSigmoid()
        self.cls_deep = Conv2d(inter_ch, num_classes, 1, rng=rng, name=f"{name}.cls_deep")
        self.cls_mid = Conv2d(mid_ch, num_classes, 1, rng=rng, name=f"{name}.cls_mid")

    def params(self):
        out = []
        for layer in (self.deep_conv, self.deep_norm, self.att_conv, self.cls_deep, self.cls_mid):
            out.extend(layer.params())
        return out

    def forward(self, pyramid: FeaturePyramid, training=False, rng=None):
        mid, deep = pyramid.mid, pyramid.deep
        if mid.shape[0] != deep.shape[0]:
            raise ShapeError("mid/deep batch sizes differ")
        self._mid_hw = (mid.shape[2], mid.shape[3])
        self._deep_hw = (deep.shape[2], deep.shape[3])
        self._out_hw = (mid.shape[2] * MID_REDUCTION, mid.shape[3] * MID_REDUCTION)

        feat = self.deep_conv.forward(deep)
        feat = self.deep_norm.forward(feat, training=training)
        feat = self.deep_act.forward(feat)
        att = self.pool.forward(deep)
        att = self.att_conv.forward(att)
        att = self.att_gate.forward(att)
        self._feat = feat
        self._att = att

        gated = feat * att
        up = bilinear_resize(gated, *self._mid_hw)
        deep_logits = self.cls_deep.forward(up)
        mid_logits = self.cls_mid.forward(mid)
        if deep_logits.shape != mid_logits.shape:
            raise ShapeError(f"branch outputs disagree: {deep_logits.shape} vs {mid_logits.shape}")
        return bilinear_resize(deep_logits + mid_logits, *self._out_hw)

    def backward(self, gy):
        gsum = bilinear_resize_backward(gy, *self._mid_hw)
        gmid = self.cls_mid.backward(gsum)
        gup = self.cls_deep.backward(gsum)
        ggated = bilinear_resize_backward(gup, *self._deep_hw)

        gfeat = ggated * self._att
        gatt = (ggated * self._feat).sum(axis=(2, 3), keepdims=True)
        gatt = self.att_gate.backward(gatt)
        gatt = self.att_conv.backward(gatt)
        gdeep = self.pool.backward(gatt)

        gfeat = self.deep_act.backward(gfeat)
        gfeat = self.deep_norm.backward(gfeat)
        gdeep = gdeep + self.deep_conv.backward(gfeat)
        self._feat = None
        self._att = None
        return gmid.astype(gy.dtype, copy=False), gdeep.astype(gy.dtype, copy=False)

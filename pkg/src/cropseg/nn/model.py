"""Segmentation model assembly.

Two backbones share the block machinery: ``standard`` is a full-width
inverted-residual backbone (squeeze-excite attention, hard-swish, dilated
final stage so the deep tap stays at 1/16), ``toy`` is a 4-stage reduced
variant with the same 1/8 and 1/16 tap structure for CPU-scale tests.

Style-bias hooks attach per backbone block: IBN swaps the block's norms,
UniStyle whitening and pAdaIN statistic swaps run on block outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from .blocks import ConvNormAct, InvertedResidual
from .core import Layer
from .features import PAdaIN, UniStyleWhiten
from .head import DEEP_REDUCTION, FeaturePyramid, LRASPPHead
from .norm import BatchNorm2d, IBNNorm

BACKBONES = ("standard", "toy")
NORM_VARIANTS = ("none", "ibn", "unistyle")

# (exp, out, kernel, stride, se, act, dil); input channels chain from the
# previous row. Strides give taps at 1/8 (mid) and 1/16 (deep); the last
# rows trade stride for dilation to hold the 1/16 grid.
_STANDARD_STEM = (16, "hswish")
_STANDARD_ROWS = [
    (16, 16, 3, 1, False, "relu", 1),
    (64, 24, 3, 2, False, "relu", 1),
    (72, 24, 3, 1, False, "relu", 1),
    (72, 40, 5, 2, True, "relu", 1),
    (120, 40, 5, 1, True, "relu", 1),
    (120, 40, 5, 1, True, "relu", 1),      # 1/8 tap
    (240, 80, 3, 2, False, "hswish", 1),
    (200, 80, 3, 1, False, "hswish", 1),
    (184, 80, 3, 1, False, "hswish", 1),
    (184, 80, 3, 1, False, "hswish", 1),
    (480, 112, 3, 1, True, "hswish", 1),
    (672, 112, 3, 1, True, "hswish", 1),
    (672, 160, 5, 1, True, "hswish", 2),
    (960, 160, 5, 1, True, "hswish", 2),
    (960, 160, 5, 1, True, "hswish", 2),
]
_STANDARD = dict(stem=_STANDARD_STEM, rows=_STANDARD_ROWS, final_ch=960,
                 mid_index=6, mid_ch=40, inter_ch=128, se_gate="hsigmoid")

_TOY_ROWS = [
    (32, 16, 3, 2, True, "relu", 1),
    (48, 24, 3, 2, True, "relu", 1),       # 1/8 tap
    (72, 40, 3, 2, True, "relu", 1),
    (120, 96, 3, 1, True, "relu", 1),
]
_TOY = dict(stem=(16, "relu"), rows=_TOY_ROWS, final_ch=None,
            mid_index=2, mid_ch=24, inter_ch=32, se_gate="sigmoid")

_TABLES = {"standard": _STANDARD, "toy": _TOY}


def backbone_num_blocks(backbone: str) -> int:
    table = _TABLES[backbone]
    return 1 + len(table["rows"]) + (1 if table["final_ch"] else 0)


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "standard"
    pretrained: bool = False
    input_size: tuple[int, int] = (224, 224)  # (width, height)
    num_classes: int = 1
    norm_variant: str = "none"
    norm_blocks: tuple[int, ...] = ()
    padain_prob: float = 0.0
    weights_path: str | None = None

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        w, h = self.input_size
        if w <= 0 or h <= 0 or w % DEEP_REDUCTION or h % DEEP_REDUCTION:
            raise ConfigError(f"input_size {self.input_size} must be positive and divisible by {DEEP_REDUCTION}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.norm_variant not in NORM_VARIANTS:
            raise ConfigError(f"norm_variant must be one of {NORM_VARIANTS}, got {self.norm_variant!r}")
        n_blocks = backbone_num_blocks(self.backbone)
        bad = [i for i in self.norm_blocks if not 0 <= i < n_blocks]
        if bad:
            raise ConfigError(f"norm_blocks {bad} out of range for {self.backbone} backbone "
                              f"(valid: 0..{n_blocks - 1})")
        if not 0.0 <= self.padain_prob <= 1.0:
            raise ConfigError("padain_prob must be in [0,1]")
        if self.pretrained and self.backbone == "toy":
            raise ConfigError("pretrained=true is not available for the toy backbone "
                              "(no pretrained weights exist for it)")
        return self

    def resolved_norm_blocks(self) -> tuple[int, ...]:
        if self.norm_variant != "none" and not self.norm_blocks:
            return (0, 1, 2)  # "first blocks" default for ibn/unistyle
        return tuple(self.norm_blocks)


@dataclass
class BackboneBlock:
    layer: Layer
    feature_ops: list[Layer] = field(default_factory=list)
    out_ch: int = 0


class Backbone(Layer):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        table = _TABLES[cfg.backbone]
        variant_blocks = set(cfg.resolved_norm_blocks())

        def norm_factory_for(idx):
            if cfg.norm_variant == "ibn" and idx in variant_blocks:
                return lambda ch, name: IBNNorm(ch, name=name)
            return lambda ch, name: BatchNorm2d(ch, name=name)

        def feature_ops_for(idx):
            ops: list[Layer] = []
            if cfg.norm_variant == "unistyle" and idx in variant_blocks:
                ops.append(UniStyleWhiten())
            if cfg.padain_prob > 0.0:
                ops.append(PAdaIN(cfg.padain_prob))
            return ops

        self.blocks: list[BackboneBlock] = []
        stem_ch, stem_act = table["stem"]
        stem = ConvNormAct(3, stem_ch, 3, 2, norm_factory_for(0), act=stem_act,
                           rng=rng, name="bb.b0")
        self.blocks.append(BackboneBlock(stem, feature_ops_for(0), stem_ch))

        ch = stem_ch
        for i, (exp, out, k, s, se, act, dil) in enumerate(table["rows"], start=1):
            block = InvertedResidual(ch, exp, out, k, s, se, norm_factory_for(i),
                                     act=act, se_gate=table["se_gate"], dil=dil,
                                     rng=rng, name=f"bb.b{i}")
            self.blocks.append(BackboneBlock(block, feature_ops_for(i), out))
            ch = out
        if table["final_ch"]:
            i = len(self.blocks)
            final = ConvNormAct(ch, table["final_ch"], 1, 1, norm_factory_for(i),
                                act="hswish", rng=rng, name=f"bb.b{i}")
            self.blocks.append(BackboneBlock(final, feature_ops_for(i), table["final_ch"]))
            ch = table["final_ch"]

        self.mid_index = table["mid_index"]
        self.deep_index = len(self.blocks) - 1
        self.mid_ch = table["mid_ch"]
        self.deep_ch = ch

    def params(self):
        out = []
        for block in self.blocks:
            out.extend(block.layer.params())
        return out

    def forward(self, x, training=False, rng=None):
        mid = None
        for i, block in enumerate(self.blocks):
            x = block.layer.forward(x, training=training, rng=rng)
            for op in block.feature_ops:
                x = op.forward(x, training=training, rng=rng)
            if i == self.mid_index:
                mid = x
        return FeaturePyramid(mid=mid, deep=x)

    def backward(self, gmid, gdeep):
        g = gdeep
        for i in range(self.deep_index, -1, -1):
            block = self.blocks[i]
            if i == self.mid_index:
                g = g + gmid
            for op in reversed(block.feature_ops):
                g = op.backward(g)
            g = block.layer.backward(g)
        return g


def _iter_layers(root):
    stack = [root]
    seen = set()
    while stack:
        obj = stack.pop()
        if id(obj) in seen:
            continue
        seen.add(id(obj))
        if isinstance(obj, Layer):
            yield obj
        values = list(vars(obj).values()) if hasattr(obj, "__dict__") else []
        if isinstance(obj, (list, tuple)):
            values = list(obj)
        for v in values:
            if isinstance(v, (Layer, list, tuple, BackboneBlock)):
                stack.append(v)


class SegModel:
    """Backbone + head with manual forward/backward over NCHW tensors."""

    def __init__(self, config: ModelConfig, backbone: Backbone, head: LRASPPHead):
        self.config = config
        self.backbone = backbone
        self.head = head
        self.meta: dict = {}
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise RuntimeError("duplicate parameter names in model")

    def parameters(self):
        return self.backbone.params() + self.head.params()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, x, training=False, rng=None):
        """(B,3,H,W) normalized images -> (B,num_classes,H,W) logits."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B,3,H,W) input, got {x.shape}")
        if x.shape[2] % DEEP_REDUCTION or x.shape[3] % DEEP_REDUCTION:
            raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {DEEP_REDUCTION}")
        pyramid = self.backbone.forward(x, training=training, rng=rng)
        pyramid.validate((x.shape[2], x.shape[3]))
        return self.head.forward(pyramid, training=training, rng=rng)

    def backward(self, glogits):
        gmid, gdeep = self.head.backward(glogits)
        return self.backbone.backward(gmid, gdeep)

    def _norm_layers(self):
        return [l for l in _iter_layers(self.backbone) if isinstance(l, BatchNorm2d)] + \
               [l for l in _iter_layers(self.head) if isinstance(l, BatchNorm2d)]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data.copy() for p in self.parameters()}
        for bn in self._norm_layers():
            state[f"{bn.name}.running_mean"] = bn.running_mean.copy()
            state[f"{bn.name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        state = dict(state)
        for p in self.parameters():
            if p.name in state:
                value = state.pop(p.name)
                if value.shape != p.data.shape:
                    raise ShapeError(f"{p.name}: checkpoint shape {value.shape} != model {p.data.shape}")
                p.data = value.astype(p.data.dtype, copy=True)
            elif strict:
                raise KeyError(f"checkpoint is missing parameter {p.name}")
        for bn in self._norm_layers():
            for suffix, attr in (("running_mean", "running_mean"), ("running_var", "running_var")):
                key = f"{bn.name}.{suffix}"
                if key in state:
                    setattr(bn, attr, state.pop(key).astype(np.float32, copy=True))
                elif strict:
                    raise KeyError(f"checkpoint is missing buffer {key}")
        if strict and state:
            raise KeyError(f"checkpoint has unexpected entries: {sorted(state)[:5]}")

    def param_checksum(self) -> float:
        return float(sum(np.abs(p.data.astype(np.float64)).sum() for p in self.parameters()))

    def copy_weights(self) -> dict[str, np.ndarray]:
        return self.state_dict()


def build_model(cfg: ModelConfig, rng=0) -> SegModel:
    """Construct a segmentation model; ``rng`` seeds weight initialization."""
    cfg.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    table = _TABLES[cfg.backbone]
    backbone = Backbone(cfg, rng)
    head = LRASPPHead(backbone.mid_ch, backbone.deep_ch, table["inter_ch"],
                      cfg.num_classes, gate=table["se_gate"], rng=rng, name="head")
    model = SegModel(cfg, backbone, head)
    if cfg.pretrained:
        if not cfg.weights_path:
            raise ConfigError("pretrained=true requires weights_path: this build has no "
                              "bundled classification weights to initialize from")
        from .checkpoint import load_state
        state = load_state(cfg.weights_path)
        backbone_state = {k: v for k, v in state.items() if k.startswith("bb.")}
        if not backbone_state:
            raise ConfigError(f"{cfg.weights_path} contains no backbone weights")
        model.load_state_dict(backbone_state, strict=False)
    return model

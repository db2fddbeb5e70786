from .checkpoint import load_checkpoint, load_meta, save_checkpoint
from .core import bilinear_resize, nearest_resize, sigmoid
from .features import PAdaIN, UniStyleWhiten, padain_swap, unistyle_whiten
from .head import FeaturePyramid, LRASPPHead
from .model import Backbone, ModelConfig, SegModel, backbone_num_blocks, build_model
from .optim import AdamW

__all__ = [
    "AdamW",
    "Backbone",
    "FeaturePyramid",
    "LRASPPHead",
    "ModelConfig",
    "PAdaIN",
    "SegModel",
    "UniStyleWhiten",
    "backbone_num_blocks",
    "bilinear_resize",
    "build_model",
    "load_checkpoint",
    "load_meta",
    "nearest_resize",
    "padain_swap",
    "save_checkpoint",
    "sigmoid",
    "unistyle_whiten",
]

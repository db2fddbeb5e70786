"""Preprocessing and augmentation, deterministic under an explicit generator.

Training pipeline order: random crop -> horizontal flip -> greyscale ->
brightness/contrast -> resize -> normalize. Geometric operations are applied
to image and mask identically; photometric operations never touch the mask.
Evaluation preprocessing is resize + normalize only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .datamodel import Sample
from .nn.core import bilinear_resize, nearest_resize

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class AugmentConfig:
    crop_factor_range: tuple[float, float] = (0.5, 1.0)
    flip_prob: float = 0.5
    greyscale_prob: float = 0.1
    brightness_contrast_max_delta: float = 0.4
    output_size: tuple[int, int] = (224, 224)  # (width, height)
    normalization: tuple[tuple[float, ...], tuple[float, ...]] = (IMAGENET_MEAN, IMAGENET_STD)

    def validate(self):
        lo, hi = self.crop_factor_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_factor_range must satisfy 0 < lo <= hi <= 1, got {self.crop_factor_range}")
        for label, p in (("flip_prob", self.flip_prob), ("greyscale_prob", self.greyscale_prob)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{label} must be in [0,1], got {p}")
        if self.brightness_contrast_max_delta < 0:
            raise ValueError("brightness_contrast_max_delta must be >= 0")
        if min(self.output_size) <= 0:
            raise ValueError(f"output_size must be positive, got {self.output_size}")
        if len(self.normalization[0]) != 3 or len(self.normalization[1]) != 3:
            raise ValueError("normalization stats must have 3 channels")
        return self


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Per-channel (value - mean) / std standardization of an (H,W,3) image."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"normalize expects (H,W,3), got {image.shape}")
    mean = np.asarray(mean, dtype=image.dtype)
    std = np.asarray(std, dtype=image.dtype)
    return (image - mean) / std


def denormalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"denormalize expects (H,W,3), got {image.shape}")
    mean = np.asarray(mean, dtype=image.dtype)
    std = np.asarray(std, dtype=image.dtype)
    return image * std + mean


def resize_pair(image: np.ndarray, mask: np.ndarray, out_w: int, out_h: int):
    """Bilinear image resize, nearest-neighbor mask resize (re-binarized)."""
    # images are HWC; resize works on trailing axes, so go through CHW
    resized = bilinear_resize(image.transpose(2, 0, 1), out_h, out_w).transpose(1, 2, 0)
    mask_resized = (nearest_resize(mask, out_h, out_w) > 0).astype(np.uint8)
    return np.ascontiguousarray(resized), mask_resized


def random_crop(sample: Sample, factor_range, rng: np.random.Generator,
                output_size=None) -> Sample:
    """Square random crop with side = round(factor * min(H, W)), factor drawn
    uniformly from ``factor_range``; optionally resized to ``output_size``."""
    lo, hi = factor_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError(f"factor range must be within (0,1], got {factor_range}")
    h, w = sample.mask.shape
    factor = lo + (hi - lo) * rng.random()
    side = int(round(factor * min(h, w)))
    if side < 1:
        raise ValueError(f"crop factor {factor:.4f} yields a crop smaller than 1 pixel")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    image = sample.image[top : top + side, left : left + side]
    mask = sample.mask[top : top + side, left : left + side]
    if output_size is not None:
        image, mask = resize_pair(image, mask, output_size[0], output_size[1])
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.domain)


def flip_horizontal(sample: Sample) -> Sample:
    return Sample(np.ascontiguousarray(sample.image[:, ::-1]),
                  np.ascontiguousarray(sample.mask[:, ::-1]), sample.domain)


def to_greyscale(image: np.ndarray) -> np.ndarray:
    """Luminance projection replicated to 3 identical channels."""
    lum = image @ np.asarray([0.299, 0.587, 0.114], dtype=image.dtype)
    return np.repeat(lum[:, :, None], 3, axis=2)


def adjust_brightness_contrast(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    """Additive brightness shift, then contrast scaling about the per-channel
    mean; result clipped back to [0,1]."""
    out = image + brightness
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = (out - mean) * (1.0 + contrast) + mean
    return np.clip(out, 0.0, 1.0)


def augment_pipeline(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Full training-time transform; a pure function of (sample, cfg, rng state).

    Every stochastic decision draws from ``rng`` in a fixed order regardless
    of outcome, so parallel workers with per-sample generator streams stay
    reproducible.
    """
    cfg.validate()
    out = random_crop(sample, cfg.crop_factor_range, rng)
    if rng.random() < cfg.flip_prob:
        out = flip_horizontal(out)
    image = out.image
    if rng.random() < cfg.greyscale_prob:
        image = to_greyscale(image)
    delta = cfg.brightness_contrast_max_delta
    brightness = (2.0 * rng.random() - 1.0) * delta
    contrast = (2.0 * rng.random() - 1.0) * delta
    image = adjust_brightness_contrast(image, brightness, contrast)
    image, mask = resize_pair(image, out.mask, cfg.output_size[0], cfg.output_size[1])
    mean, std = cfg.normalization
    return Sample(normalize(image.astype(np.float32), mean, std), mask, sample.domain)


def eval_preprocess(sample: Sample, cfg: AugmentConfig) -> Sample:
    """Deterministic evaluation-time transform: resize + normalize only."""
    image, mask = resize_pair(sample.image, sample.mask, cfg.output_size[0], cfg.output_size[1])
    mean, std = cfg.normalization
    return Sample(normalize(image.astype(np.float32), mean, std), mask, sample.domain)

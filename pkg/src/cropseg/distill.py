"""Loss mathematics: temperature softmaxes, KL distillation losses,
binary cross-entropy, teacher ensembling, and the combined objective.

Conventions
-----------
Logit tensors are (C, H, W) or (B, C, H, W); losses are defined per sample
and averaged over the batch. All values and gradients are computed in
float64 regardless of input dtype. Softmaxes use max-subtraction; KL is
accumulated as ``p * (log p - log q)`` with terms where ``p < 1e-12``
contributing zero. Teacher logits are constants: gradients are only ever
produced with respect to the student argument.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

SOFTMAX_AXES = ("spatial", "channel")
_P_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 1.0
    kd_weight: float = 3.0
    softmax_axis: str = "spatial"

    def validate(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.kd_weight < 0:
            raise ConfigError(f"kd_weight must be >= 0, got {self.kd_weight}")
        if self.softmax_axis not in SOFTMAX_AXES:
            raise ConfigError(f"softmax_axis must be one of {SOFTMAX_AXES}")
        return self


@dataclass
class EnsembleOutput:
    """Mean of per-domain teacher logits; constant w.r.t. any gradient."""

    values: np.ndarray
    num_teachers: int


@dataclass
class TotalLoss:
    total: float
    ce: float
    kd: float


def _as_batched(logits) -> tuple[np.ndarray, bool]:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (B,C,H,W) logits, got shape {np.shape(logits)}")
    return x, False


def _teacher_values(teacher) -> np.ndarray:
    return teacher.values if isinstance(teacher, EnsembleOutput) else np.asarray(teacher)


def ensemble_teachers(teacher_logits) -> EnsembleOutput:
    """Element-wise mean of the teacher logit maps.

    The stack is sorted element-wise before summation so the result is
    bit-identical under any reordering of the teacher list.
    """
    maps = [np.asarray(t) for t in teacher_logits]
    if not maps:
        raise ValueError("ensemble_teachers requires at least one teacher")
    shape = maps[0].shape
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise ShapeError(f"teacher {i} has shape {m.shape}, expected {shape}")
    stack = np.sort(np.stack([m.astype(np.float64) for m in maps]), axis=0)
    mean = stack.sum(axis=0) / len(maps)
    return EnsembleOutput(values=mean.astype(maps[0].dtype), num_teachers=len(maps))


def _log_softmax_spatial(logits4: np.ndarray, tau: float) -> np.ndarray:
    b, c, h, w = logits4.shape
    s = (logits4 / tau).reshape(b, c, h * w)
    s = s - s.max(axis=2, keepdims=True)
    logz = np.log(np.exp(s).sum(axis=2, keepdims=True))
    return (s - logz).reshape(b, c, h, w)


def _log_softmax_channel(logits4: np.ndarray, tau: float) -> np.ndarray:
    s = logits4 / tau
    s = s - s.max(axis=1, keepdims=True)
    logz = np.log(np.exp(s).sum(axis=1, keepdims=True))
    return s - logz


def spatial_softmax(logits, tau: float):
    """Softmax over the flattened spatial positions of each channel."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    x, squeeze = _as_batched(logits)
    if not np.isfinite(x).all():
        raise FloatingPointError("spatial_softmax: non-finite logits")
    out = np.exp(_log_softmax_spatial(x, tau))
    return out[0] if squeeze else out


def channel_softmax(logits, tau: float):
    """Per-position softmax over channels; undefined for single-channel maps."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    x, squeeze = _as_batched(logits)
    if x.shape[1] < 2:
        raise ConfigError("channel_softmax is undefined for C=1; binary maps use the "
                          "single-channel formulation (spatial softmax + sigmoid BCE)")
    if not np.isfinite(x).all():
        raise FloatingPointError("channel_softmax: non-finite logits")
    out = np.exp(_log_softmax_channel(x, tau))
    return out[0] if squeeze else out


def _check_pair(teacher, student):
    t, t_sq = _as_batched(_teacher_values(teacher))
    s, s_sq = _as_batched(student)
    if t.shape != s.shape:
        raise ShapeError(f"teacher shape {t.shape} != student shape {s.shape}")
    return t, s, s_sq


def _kl_terms(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    p = np.exp(logp)
    terms = p * (logp - logq)
    return np.where(p < _P_FLOOR, 0.0, terms)


def kd_loss_spatial(teacher, student, tau: float) -> float:
    """KL between spatial softmaxes of teacher and student logits.

    Per sample: (tau^2 / C) * sum over channels and flattened positions of
    p * log(p / q); batch mean.
    """
    loss, _ = kd_loss_spatial_grad(teacher, student, tau, need_grad=False)
    return loss


def kd_loss_spatial_grad(teacher, student, tau: float, need_grad: bool = True):
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    t, s, squeeze = _check_pair(teacher, student)
    b, c = s.shape[0], s.shape[1]
    logp = _log_softmax_spatial(t, tau)
    logq = _log_softmax_spatial(s, tau)
    loss = float(_kl_terms(logp, logq).sum() * tau * tau / (c * b))
    if not need_grad:
        return loss, None
    grad = (np.exp(logq) - np.exp(logp)) * (tau / (c * b))
    return loss, grad[0] if squeeze else grad


def kd_loss_channel(teacher, student, tau: float) -> float:
    """Per-position KL between channel softmaxes, averaged over positions,
    scaled by tau^2; batch mean."""
    loss, _ = kd_loss_channel_grad(teacher, student, tau, need_grad=False)
    return loss


def kd_loss_channel_grad(teacher, student, tau: float, need_grad: bool = True):
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    t, s, squeeze = _check_pair(teacher, student)
    if s.shape[1] < 2:
        raise ConfigError("kd_loss_channel is undefined for C=1; use the spatial variant")
    b, _, h, w = s.shape
    logp = _log_softmax_channel(t, tau)
    logq = _log_softmax_channel(s, tau)
    loss = float(_kl_terms(logp, logq).sum() * tau * tau / (h * w * b))
    if not need_grad:
        return loss, None
    grad = (np.exp(logq) - np.exp(logp)) * (tau / (h * w * b))
    return loss, grad[0] if squeeze else grad


def _as_mask(mask, target_shape):
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    if m.ndim != 3:
        raise ShapeError(f"expected (H,W) or (B,H,W) mask, got shape {np.shape(mask)}")
    values = np.unique(m)
    if not np.isin(values, (0.0, 1.0)).all():
        raise ValueError(f"mask must be binary, found values {values[:4]}")
    if m.shape != target_shape:
        raise ShapeError(f"mask shape {m.shape} does not match logits {target_shape}")
    return m


def bce_loss(mask, student) -> float:
    """Pixel-mean binary cross-entropy between labels and logits (stable form)."""
    loss, _ = bce_loss_grad(mask, student, need_grad=False)
    return loss


def bce_loss_grad(mask, student, need_grad: bool = True):
    s, squeeze = _as_batched(student)
    if s.shape[1] != 1:
        raise ConfigError(f"bce_loss expects single-channel logits, got C={s.shape[1]}")
    z = s[:, 0]
    y = _as_mask(mask, z.shape)
    # max(z,0) - z*y + log(1 + exp(-|z|))
    per_pixel = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per_pixel.mean())
    if not need_grad:
        return loss, None
    prob = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
    grad = ((prob - y) / z.size)[:, None]
    return loss, grad[0] if squeeze else grad


def total_loss(mask, teacher, student, cfg: LossConfig) -> TotalLoss:
    """Cross-entropy plus weighted distillation loss; returns all components."""
    out, _ = total_loss_grad(mask, teacher, student, cfg, need_grad=False)
    return out


def total_loss_grad(mask, teacher, student, cfg: LossConfig, need_grad: bool = True):
    cfg.validate()
    ce, gce = bce_loss_grad(mask, student, need_grad=need_grad)
    if cfg.softmax_axis == "spatial":
        kd, gkd = kd_loss_spatial_grad(teacher, student, cfg.temperature, need_grad=need_grad)
    else:
        kd, gkd = kd_loss_channel_grad(teacher, student, cfg.temperature, need_grad=need_grad)
    out = TotalLoss(total=ce + cfg.kd_weight * kd, ce=ce, kd=kd)
    if not need_grad:
        return out, None
    return out, gce + cfg.kd_weight * gkd

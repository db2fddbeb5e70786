"""Training loops: the pooled-source baseline, per-domain teacher
pretraining, and student distillation.

All randomness derives from TrainConfig.seed through named child streams
(init / batch order / augmentation / stochastic layers), so a run is
reproducible and the student trained with kd_weight=0 consumes exactly the
same stream sequence as the baseline trainer.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment_pipeline
from .datamodel import DomainDataset, split_train_val
from .distill import LossConfig, bce_loss_grad, ensemble_teachers, total_loss_grad
from .errors import ConfigError, TrainingDiverged
from .evaluate import IoUConfig, evaluate_items
from .nn import AdamW, ModelConfig, SegModel, build_model

log = logging.getLogger(__name__)

METHODS = ("erm", "ibn", "padain", "unistyle", "ensemble_kd", "ensemble_kd_unistyle")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 50
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    weight_decay: float = 1e-5
    schedule_power: float = 1.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule_power <= 0:
            raise ConfigError("schedule_power must be > 0")
        self.loss.validate()
        self.model.validate()
        self.augment.validate()
        return self


@dataclass(frozen=True)
class MethodConfig:
    """A benchmark method and its per-method knobs."""

    name: str
    norm_blocks: tuple[int, ...] = ()
    padain_prob: float | None = None
    kd_weight: float | None = None
    temperature: float | None = None
    softmax_axis: str | None = None

    def validate(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}; valid methods: {METHODS}")
        return self

    def display(self) -> str:
        parts = []
        if self.norm_blocks:
            parts.append(f"blocks={list(self.norm_blocks)}")
        for label, value in (("p", self.padain_prob), ("lam", self.kd_weight),
                             ("tau", self.temperature), ("axis", self.softmax_axis)):
            if value is not None:
                parts.append(f"{label}={value}")
        return self.name if not parts else f"{self.name}({','.join(parts)})"


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loss_ce: float
    loss_kd: float
    val_iou: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        if not self.records:
            raise ValueError("empty history")
        best = max(range(len(self.records)), key=lambda i: self.records[i].val_iou)
        return self.records[best].epoch

    @property
    def best_val_iou(self) -> float:
        return max(r.val_iou for r in self.records)

    def append_jsonl(self, path):
        with open(path, "a") as fh:
            fh.write(json.dumps(dataclasses.asdict(self.records[-1])) + "\n")


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Polynomial decay from lr_start to lr_end; endpoints are exact."""
    if total_steps <= 0:
        raise ValueError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return cfg.lr_start
    if step == total_steps:
        return cfg.lr_end
    frac = 1.0 - step / total_steps
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * frac ** cfg.schedule_power


def prepare_task_data(sources, val_fraction: float, seed: int):
    """Per-domain train/val split (uniform fraction), pooled across domains."""
    train_items: list[tuple[DomainDataset, int]] = []
    val_items: list[tuple[DomainDataset, int]] = []
    for dataset in sources:
        train_ds, val_ds = split_train_val(dataset, val_fraction, seed)
        train_items.extend((train_ds, i) for i in range(len(train_ds)))
        val_items.extend((val_ds, i) for i in range(len(val_ds)))
    return train_items, val_items


def _stack_batch(samples):
    x = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    y = np.stack([s.mask for s in samples]).astype(np.float64)
    return np.ascontiguousarray(x), y


def _run_training(train_items, val_items, cfg: TrainConfig, teachers=None,
                  label="train", log_path=None, iou_cfg=None,
                  progress: bool = True):
    cfg.validate()
    if not train_items:
        raise ValueError("no training samples")
    if teachers is not None:
        for i, teacher in enumerate(teachers):
            if teacher.config.num_classes != cfg.model.num_classes:
                raise ConfigError(f"teacher {i} has {teacher.config.num_classes} classes, "
                                  f"student expects {cfg.model.num_classes}")
    iou_cfg = iou_cfg or IoUConfig()

    root_ss = np.random.SeedSequence(cfg.seed)
    init_ss, order_ss, aug_ss, layer_ss = root_ss.spawn(4)
    model = build_model(cfg.model, rng=np.random.default_rng(init_ss))
    order_rng = np.random.default_rng(order_ss)
    aug_rng = np.random.default_rng(aug_ss)
    layer_rng = np.random.default_rng(layer_ss)

    optimizer = AdamW(model.parameters(), lr=cfg.lr_start, weight_decay=cfg.weight_decay)
    n = len(train_items)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    history = TrainHistory()
    best_iou = -1.0
    best_state = None
    best_epoch = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        epoch_losses, epoch_ce, epoch_kd = [], [], []
        lr = cfg.lr_start
        for start in range(0, n, cfg.batch_size):
            batch_items = [train_items[i] for i in order[start : start + cfg.batch_size]]
            samples = [augment_pipeline(ds.load(i), cfg.augment, aug_rng)
                       for ds, i in batch_items]
            x, y = _stack_batch(samples)

            if teachers is not None:
                teacher_logits = [t.forward(x, training=False) for t in teachers]
                target = ensemble_teachers(teacher_logits)
                logits = model.forward(x, training=True, rng=layer_rng)
                losses, grad = total_loss_grad(y, target, logits, cfg.loss)
                total, ce, kd = losses.total, losses.ce, losses.kd
            else:
                logits = model.forward(x, training=True, rng=layer_rng)
                ce, grad = bce_loss_grad(y, logits)
                total, kd = ce, 0.0

            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"{label}: non-finite loss at epoch {epoch}, step {step}",
                    epoch=epoch, step=step)
            lr = lr_schedule(step, total_steps, cfg)
            model.zero_grad()
            model.backward(grad.astype(np.float32))
            optimizer.step(lr=lr)
            step += 1
            epoch_losses.append(total)
            epoch_ce.append(ce)
            epoch_kd.append(kd)

        val_iou = evaluate_items(model, val_items, iou_cfg, cfg.augment) if val_items else 0.0
        history.records.append(EpochRecord(
            epoch=epoch, loss=float(np.mean(epoch_losses)), loss_ce=float(np.mean(epoch_ce)),
            loss_kd=float(np.mean(epoch_kd)), val_iou=val_iou, lr=lr))
        if log_path:
            history.append_jsonl(log_path)
        if progress:
            log.info("%s epoch %d/%d loss=%.4f ce=%.4f kd=%.4f val_iou=%.4f lr=%.2e",
                     label, epoch, cfg.epochs, history.records[-1].loss,
                     history.records[-1].loss_ce, history.records[-1].loss_kd, val_iou, lr)
        if val_iou > best_iou:
            best_iou = val_iou
            best_state = model.state_dict()
            best_epoch = epoch

    if best_state is not None:
        model.load_state_dict(best_state)
    model.meta.update({"label": label, "seed": cfg.seed, "best_epoch": best_epoch,
                       "val_iou": best_iou})
    return model, history


def train_erm(sources, cfg: TrainConfig, val_fraction: float = 0.1,
              log_path=None, label="erm", iou_cfg=None):
    """Minimize pooled-source BCE; return the best-validation checkpoint."""
    if not sources:
        raise ValueError("train_erm requires at least one source domain")
    train_items, val_items = prepare_task_data(sources, val_fraction, cfg.seed)
    return _run_training(train_items, val_items, cfg, teachers=None, label=label,
                         log_path=log_path, iou_cfg=iou_cfg)


def teacher_seed(base_seed: int, domain_name: str) -> int:
    """Stable per-domain seed so a cached teacher is identical regardless of
    which task requests it."""
    mix = np.random.SeedSequence((base_seed, zlib.crc32(domain_name.encode())))
    return int(mix.generate_state(1)[0])


def train_teachers(sources, cfg: TrainConfig, val_fraction: float = 0.1,
                   log_dir=None, iou_cfg=None):
    """One specialized model per source domain, each trained on that domain
    alone with its own train/val split; order matches the source order."""
    if not sources:
        raise ValueError("train_teachers requires at least one source domain")
    teachers = []
    for dataset in sources:
        tcfg = replace(cfg, seed=teacher_seed(cfg.seed, dataset.name))
        log_path = Path(log_dir) / f"teacher_{dataset.name}.jsonl" if log_dir else None
        model, _ = train_erm([dataset], tcfg, val_fraction=val_fraction,
                             log_path=log_path, label=f"teacher[{dataset.name}]",
                             iou_cfg=iou_cfg)
        model.meta["domain"] = dataset.name
        teachers.append(model)
    return teachers


def train_student(sources, teachers, cfg: TrainConfig, val_fraction: float = 0.1,
                  log_path=None, iou_cfg=None):
    """Distill the frozen teacher ensemble into a student trained on the
    pooled sources; teachers see the same augmented batches as the student."""
    if not teachers:
        raise ValueError("train_student requires at least one teacher")
    train_items, val_items = prepare_task_data(sources, val_fraction, cfg.seed)
    return _run_training(train_items, val_items, cfg, teachers=teachers,
                         label="student", log_path=log_path, iou_cfg=iou_cfg)


def apply_method(method: MethodConfig, cfg: TrainConfig) -> TrainConfig:
    """Resolve a method name plus overrides into a concrete TrainConfig."""
    method.validate()
    model = cfg.model
    loss = cfg.loss
    if method.name == "ibn":
        model = replace(model, norm_variant="ibn",
                        norm_blocks=method.norm_blocks or (0, 1, 2))
    elif method.name == "padain":
        prob = 1e-3 if method.padain_prob is None else method.padain_prob
        model = replace(model, padain_prob=prob)
    elif method.name in ("unistyle", "ensemble_kd_unistyle"):
        model = replace(model, norm_variant="unistyle",
                        norm_blocks=method.norm_blocks or (0, 1, 2))
    if method.name.startswith("ensemble_kd"):
        loss = replace(
            loss,
            kd_weight=loss.kd_weight if method.kd_weight is None else method.kd_weight,
            temperature=loss.temperature if method.temperature is None else method.temperature,
            softmax_axis=loss.softmax_axis if method.softmax_axis is None else method.softmax_axis,
        )
    return replace(cfg, model=model, loss=loss)


def teacher_model_config(cfg: TrainConfig) -> ModelConfig:
    """Teachers are plain ERM models: no whitening/statistic hooks."""
    return replace(cfg.model, norm_variant="none", norm_blocks=(), padain_prob=0.0)


def train_baseline(method: MethodConfig, sources, cfg: TrainConfig,
                   val_fraction: float = 0.1, teachers=None, log_path=None,
                   iou_cfg=None):
    """Dispatch a method name to the right model construction and trainer."""
    run_cfg = apply_method(method, cfg)
    if method.name.startswith("ensemble_kd"):
        if teachers is None:
            teacher_cfg = replace(run_cfg, model=teacher_model_config(cfg))
            teachers = train_teachers(sources, teacher_cfg, val_fraction=val_fraction,
                                      iou_cfg=iou_cfg)
        return train_student(sources, teachers, run_cfg, val_fraction=val_fraction,
                             log_path=log_path, iou_cfg=iou_cfg)
    return train_erm(sources, run_cfg, val_fraction=val_fraction, log_path=log_path,
                     label=method.name, iou_cfg=iou_cfg)

"""IoU metric, per-domain evaluation, benchmark grid runner, aggregation.

Benchmark results persist as one JSON record per (method, target, seed)
cell under ``out_dir/results/<mode>/``, so a crashed grid resumes without
retraining finished cells and independent invocations can split the grid.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, eval_preprocess
from .datamodel import DatasetManifest, leave_one_out_tasks
from .errors import ConfigError, ShapeError
from .nn import load_checkpoint, save_checkpoint, sigmoid
from .nn.core import bilinear_resize

log = logging.getLogger(__name__)

BENCHMARK_MODES = ("leave_one_out", "fixed_sources")


@dataclass(frozen=True)
class IoUConfig:
    confidence_threshold: float = 0.9

    def validate(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ConfigError(
                f"confidence_threshold must be inside (0,1), got {self.confidence_threshold}")
        return self


def iou(probabilities, mask, cfg: IoUConfig | None = None) -> float:
    """Binarize probabilities at the confidence threshold and compute
    |pred AND mask| / |pred OR mask|; both-empty counts as 1.0."""
    cfg = (cfg or IoUConfig()).validate()
    probs = np.asarray(probabilities)
    m = np.asarray(mask)
    if probs.shape != m.shape:
        raise ShapeError(f"probabilities {probs.shape} vs mask {m.shape}")
    bad = np.setdiff1d(np.unique(m), [0, 1])
    if bad.size:
        raise ValueError(f"mask must be binary, found {bad[:4]}")
    pred = probs >= cfg.confidence_threshold
    gt = m.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def _model_augment_cfg(model, augment_cfg: AugmentConfig | None) -> AugmentConfig:
    if augment_cfg is not None:
        return augment_cfg
    return AugmentConfig(output_size=tuple(model.config.input_size))


def evaluate_items(model, items, iou_cfg: IoUConfig | None = None,
                   augment_cfg: AugmentConfig | None = None, batch_size: int = 16) -> float:
    """Mean per-sample IoU over (dataset, index) pairs with deterministic
    preprocessing (resize + normalize, no stochastic ops)."""
    if not items:
        raise ValueError("cannot evaluate an empty sample list")
    iou_cfg = (iou_cfg or IoUConfig()).validate()
    augment_cfg = _model_augment_cfg(model, augment_cfg)
    scores = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        originals = [ds.load(i) for ds, i in chunk]
        processed = [eval_preprocess(s, augment_cfg) for s in originals]
        x = np.ascontiguousarray(
            np.stack([s.image.transpose(2, 0, 1) for s in processed]).astype(np.float32))
        logits = model.forward(x, training=False)
        probs = sigmoid(logits[:, 0].astype(np.float64))
        for sample, prob in zip(originals, probs):
            if prob.shape != sample.mask.shape:
                prob = bilinear_resize(prob, *sample.mask.shape)
            scores.append(iou(prob, sample.mask, iou_cfg))
    return float(np.mean(scores))


def evaluate_domain(model, dataset, iou_cfg: IoUConfig | None = None,
                    augment_cfg: AugmentConfig | None = None, batch_size: int = 16) -> float:
    """Mean per-sample IoU of a model over one domain."""
    if len(dataset) == 0:
        raise ValueError(f"domain {dataset.name!r} is empty")
    items = [(dataset, i) for i in range(len(dataset))]
    return evaluate_items(model, items, iou_cfg, augment_cfg, batch_size)


# --- benchmark runner ---------------------------------------------------------

@dataclass
class BenchmarkResult:
    method: str
    target_domain: str
    seed: int
    iou: float
    status: str = "ok"
    detail: dict = field(default_factory=dict)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_")


def _write_json_atomic(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=1)
    os.replace(tmp, path)


def _cell_path(out_dir: Path, mode: str, method_name: str, target: str, seed: int) -> Path:
    return out_dir / "results" / mode / _slug(method_name) / _slug(target) / f"{seed}.json"


def _load_cell(path: Path) -> BenchmarkResult | None:
    if not path.is_file():
        return None
    try:
        data = json.loads(path.read_text())
        return BenchmarkResult(method=data["method"], target_domain=data["target_domain"],
                               seed=int(data["seed"]), iou=float(data["iou"]),
                               status=data.get("status", "ok"),
                               detail=data.get("detail", {}))
    except (ValueError, KeyError):
        log.warning("ignoring unreadable result cell %s", path)
        return None


def _save_cell(path: Path, result: BenchmarkResult):
    _write_json_atomic(path, dataclasses.asdict(result))


def config_fingerprint(train_cfg) -> str:
    payload = dataclasses.asdict(train_cfg)
    payload.pop("seed", None)
    return hashlib.sha1(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _get_cached_teachers(sources, run_cfg, out_dir: Path, seed: int, iou_cfg):
    """Teachers keyed by (domain, seed, config); trained once, reused across
    every task of the grid that shares them."""
    from .train import teacher_model_config, train_teachers
    from dataclasses import replace

    teacher_cfg = replace(run_cfg, seed=seed, model=teacher_model_config(run_cfg))
    fingerprint = config_fingerprint(teacher_cfg)
    teachers = []
    for dataset in sources:
        path = out_dir / "teachers" / f"{_slug(dataset.name)}__s{seed}.npz"
        if path.is_file():
            model, meta = load_checkpoint(path)
            if (model.meta.get("domain") == dataset.name
                    and model.meta.get("fingerprint") == fingerprint):
                teachers.append(model)
                continue
            log.info("teacher cache mismatch for %s, retraining", dataset.name)
        model = train_teachers([dataset], teacher_cfg, iou_cfg=iou_cfg)[0]
        model.meta["fingerprint"] = fingerprint
        save_checkpoint(path, model, seed=seed, epoch=model.meta.get("best_epoch", 0),
                        val_iou=model.meta.get("val_iou", 0.0), extra=model.meta)
        teachers.append(model)
    return teachers


def run_benchmark(manifest: DatasetManifest, methods, domain_names, seeds,
                  mode: str = "leave_one_out", extra_targets=None, *,
                  train_cfg, out_dir, val_fraction: float = 0.1,
                  iou_cfg: IoUConfig | None = None, train_fn=None,
                  save_checkpoints: bool = True) -> list[BenchmarkResult]:
    """Execute the (method x target x seed) grid, persisting each cell.

    ``train_fn(method_cfg, sources, cfg, teachers)`` can be injected for
    tests; by default teachers are trained once per (domain, seed) and
    shared across tasks.
    """
    from dataclasses import replace

    from .train import train_baseline

    if mode not in BENCHMARK_MODES:
        raise ConfigError(f"mode must be one of {BENCHMARK_MODES}, got {mode!r}")
    iou_cfg = (iou_cfg or IoUConfig()).validate()
    out_dir = Path(out_dir)
    domain_names = list(domain_names)
    methods = [m.validate() for m in methods]
    seeds = list(seeds)

    if mode == "leave_one_out":
        if len(domain_names) < 2:
            raise ConfigError("leave_one_out needs at least 2 domains")
        tasks = leave_one_out_tasks(manifest, domain_names, val_fraction)
        grid = [(task.target.name, task) for task in tasks]
    else:
        if not extra_targets:
            raise ConfigError("fixed_sources mode requires extra_targets")
        overlap = set(extra_targets) & set(domain_names)
        if overlap:
            raise ConfigError(f"extra_targets overlap training domains: {sorted(overlap)}")
        sources = [manifest.dataset(name) for name in domain_names]
        grid = [(name, sources) for name in extra_targets]

    results: list[BenchmarkResult] = []
    for method in methods:
        method_name = method.display()
        for seed in seeds:
            run_cfg = replace(train_cfg, seed=seed)
            trained_model = None  # shared across targets in fixed_sources mode
            for target_name, task_or_sources in grid:
                cell = _cell_path(out_dir, mode, method_name, target_name, seed)
                existing = _load_cell(cell)
                if existing is not None and existing.status == "ok":
                    results.append(existing)
                    continue
                try:
                    if mode == "leave_one_out":
                        task = task_or_sources
                        sources = task.sources
                    else:
                        sources = task_or_sources
                    assert target_name not in [s.name for s in sources]

                    model = trained_model
                    if model is None:
                        teachers = None
                        if train_fn is None and method.name.startswith("ensemble_kd"):
                            teachers = _get_cached_teachers(sources, run_cfg, out_dir,
                                                            seed, iou_cfg)
                        fn = train_fn or train_baseline
                        model, _history = fn(method, sources, run_cfg, teachers=teachers)
                        if mode == "fixed_sources":
                            trained_model = model
                        if save_checkpoints and train_fn is None:
                            ckpt_target = "ALL" if mode == "fixed_sources" else target_name
                            ckpt = (out_dir / "checkpoints" / _slug(method_name)
                                    / _slug(ckpt_target) / f"{seed}.npz")
                            save_checkpoint(ckpt, model, seed=seed,
                                            epoch=model.meta.get("best_epoch", 0),
                                            val_iou=model.meta.get("val_iou", 0.0),
                                            extra={"method": method_name,
                                                   "target": ckpt_target})

                    target_ds = manifest.dataset(target_name)
                    score = evaluate_domain(model, target_ds, iou_cfg, run_cfg.augment)
                    result = BenchmarkResult(
                        method=method_name, target_domain=target_name, seed=seed,
                        iou=score,
                        detail={"method_name": method.name,
                                "params": dataclasses.asdict(method),
                                "val_iou": model.meta.get("val_iou"),
                                "best_epoch": model.meta.get("best_epoch")})
                except Exception as exc:  # record and continue with the grid
                    log.warning("cell (%s, %s, %s) failed: %s", method_name, target_name,
                                seed, exc)
                    result = BenchmarkResult(method=method_name, target_domain=target_name,
                                             seed=seed, iou=float("nan"), status="failed",
                                             detail={"error": str(exc)})
                _save_cell(cell, result)
                results.append(result)
    return results


def expected_cells(methods, targets, seeds):
    return [(m.display(), t, s) for m in methods for t in targets for s in seeds]


def missing_or_failed(results, methods, targets, seeds):
    have = {(r.method, r.target_domain, r.seed) for r in results if r.status == "ok"}
    return [cell for cell in expected_cells(methods, targets, seeds) if cell not in have]


# --- aggregation -----------------------------------------------------------------

@dataclass
class CellStat:
    mean: float
    std: float
    n: int
    failed: int = 0

    @property
    def single_seed(self) -> bool:
        return self.n == 1


@dataclass
class AggregateReport:
    methods: list[str]
    targets: list[str]
    cells: dict
    averages: dict
    warnings: list[str]

    def to_csv(self) -> str:
        lines = ["method," + ",".join(self.targets) + ",average"]
        for m in self.methods:
            row = [m]
            for t in self.targets:
                stat = self.cells.get((m, t))
                row.append("" if stat is None else f"{stat.mean * 100:.2f}±{stat.std * 100:.2f}")
            avg = self.averages.get(m)
            row.append("" if avg is None else f"{avg * 100:.2f}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        best = {}
        for t in self.targets:
            means = [(self.cells[(m, t)].mean, m) for m in self.methods if (m, t) in self.cells]
            if means:
                best[t] = max(means)[1]
        width = max(len(m) for m in self.methods) + 2
        header = "method".ljust(width) + "".join(t.rjust(18) for t in self.targets) + "average".rjust(12)
        lines = [header, "-" * len(header)]
        for m in self.methods:
            row = m.ljust(width)
            for t in self.targets:
                stat = self.cells.get((m, t))
                if stat is None:
                    row += "-".rjust(18)
                else:
                    mark = "*" if best.get(t) == m else " "
                    row += f"{stat.mean * 100:6.2f}±{stat.std * 100:5.2f}{mark}".rjust(18)
            avg = self.averages.get(m)
            row += ("-" if avg is None else f"{avg * 100:6.2f}").rjust(12)
            lines.append(row)
        for warning in self.warnings:
            lines.append(f"! {warning}")
        return "\n".join(lines) + "\n"


def aggregate(results) -> AggregateReport:
    """Per (method, target): mean and sample standard deviation over seeds,
    plus a per-method average of the per-target means."""
    ok = [r for r in results if r.status == "ok"]
    failed = [r for r in results if r.status != "ok"]
    if not ok:
        raise ValueError("no successful results to aggregate")
    methods = list(dict.fromkeys(r.method for r in results))
    targets = list(dict.fromkeys(r.target_domain for r in results))
    cells = {}
    warnings = []
    for m in methods:
        for t in targets:
            values = [r.iou for r in ok if r.method == m and r.target_domain == t]
            n_failed = sum(1 for r in failed if r.method == m and r.target_domain == t)
            if not values:
                if n_failed:
                    warnings.append(f"cell ({m}, {t}) has no successful runs")
                continue
            std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            if len(values) == 1:
                warnings.append(f"cell ({m}, {t}) aggregates a single seed; std reported as 0")
            cells[(m, t)] = CellStat(mean=float(np.mean(values)), std=std,
                                     n=len(values), failed=n_failed)
    averages = {}
    for m in methods:
        means = [cells[(m, t)].mean for t in targets if (m, t) in cells]
        if means:
            averages[m] = float(np.mean(means))
    return AggregateReport(methods=methods, targets=targets, cells=cells,
                           averages=averages, warnings=warnings)

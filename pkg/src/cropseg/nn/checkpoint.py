"""Checkpoint serialization: weight map + model config + run metadata,
written atomically (temp file in the same directory, then rename)."""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelConfig, SegModel, build_model

_META_KEY = "__meta_json__"


def save_checkpoint(path, model: SegModel, seed: int, epoch: int, val_iou: float,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "model_config": dataclasses.asdict(model.config),
        "seed": int(seed),
        "epoch": int(epoch),
        "val_iou": float(val_iou),
        "extra": extra or {},
    }
    arrays = dict(model.state_dict())
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_state(path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {k: data[k] for k in data.files if k != _META_KEY}


def load_meta(path) -> dict:
    with np.load(path) as data:
        return json.loads(bytes(data[_META_KEY]).decode())


def load_checkpoint(path) -> tuple[SegModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    meta = load_meta(path)
    cfg_dict = dict(meta["model_config"])
    cfg_dict["input_size"] = tuple(cfg_dict["input_size"])
    cfg_dict["norm_blocks"] = tuple(cfg_dict["norm_blocks"])
    cfg_dict["pretrained"] = False  # weights come from the checkpoint itself
    cfg = ModelConfig(**cfg_dict)
    model = build_model(cfg, rng=np.random.default_rng(0))
    model.load_state_dict(load_state(path))
    model.meta.update(meta.get("extra", {}))
    return model, meta

"""Run-config file loading.

A run config is a JSON document with optional sections:

    {
      "world": { ...WorldSpec fields... },
      "model": { "blocks": 2, "dim": 64, "heads": 4 },
      "train": { ...TrainConfig fields... },
      "io":    { "world": "world.json", "dataset": "data.csw", "out_dir": "runs/x" }
    }

Unknown keys are rejected so typos fail fast; JSON syntax errors are
reported with line and column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import SpecValidationError
from .training import TrainConfig
from .world import WorldSpec

MODEL_SECTION_KEYS = ("blocks", "dim", "heads")


@dataclass
class RunConfig:
    world_spec: WorldSpec
    model_kwargs: dict
    train: TrainConfig
    io: dict


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise SpecValidationError(f"unknown key(s) in {where}: {sorted(unknown)}")


def load_run_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecValidationError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise SpecValidationError(f"{path}: top level must be an object")
    _check_keys(raw, ("world", "model", "train", "io"), str(path))

    world_raw = dict(raw.get("world", {}))
    world_fields = {f.name for f in fields(WorldSpec)}
    _check_keys(world_raw, world_fields, f"{path}:world")
    if "attr_correlation" in world_raw and world_raw["attr_correlation"] is not None:
        world_raw["attr_correlation"] = np.asarray(world_raw["attr_correlation"], dtype=np.float64)
    world_spec = WorldSpec(**world_raw)
    world_spec.validate()

    model_raw = dict(raw.get("model", {}))
    _check_keys(model_raw, MODEL_SECTION_KEYS, f"{path}:model")

    train_raw = dict(raw.get("train", {}))
    train_fields = {f.name for f in fields(TrainConfig)}
    _check_keys(train_raw, train_fields, f"{path}:train")
    train = TrainConfig(**train_raw)
    train.validate()

    io_raw = dict(raw.get("io", {}))
    _check_keys(io_raw, ("world", "dataset", "out_dir", "run_name"), f"{path}:io")
    return RunConfig(world_spec=world_spec, model_kwargs=model_raw, train=train, io=io_raw)

"""Run configuration: model + training + paths, read from a YAML file.

Unknown keys are rejected rather than ignored so a typo cannot silently fall
back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .network import ALANetConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ALANetConfig
    train: TrainConfig
    data: DataConfig


def _build(dc_type, raw: dict, section: str):
    known = {f.name: f for f in fields(dc_type)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown keys in config section '{section}': {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if isinstance(known[key].default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return dc_type(**kwargs)


def load_run_config(path) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must contain a mapping")
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise ValueError(f"unknown top-level config sections: {sorted(unknown)}")
    model = _build(ALANetConfig, raw.get("model") or {}, "model").validate()
    train = _build(TrainConfig, raw.get("train") or {}, "train").validate()
    data = _build(DataConfig, raw.get("data") or {}, "data")
    return RunConfig(model=model, train=train, data=data)

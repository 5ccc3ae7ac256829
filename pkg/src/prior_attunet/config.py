"""Flat YAML run configuration mirroring ModelConfig + TrainConfig.

Example::

    preset: desk          # desk | full, chooses the defaults below
    base_c: 8
    epochs: 30
    lr: 0.001
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .diffcore import ConfigurationError
from .net import ModelConfig
from .optim import TrainConfig

RUN_KEYS = {"preset": "desk", "phantom_count": 300, "prior_count": 200, "phantom_preset": "desk"}
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    preset: str = "desk"
    phantom_count: int = 300
    prior_count: int = 200
    phantom_preset: str = "desk"

    def to_flat(self) -> dict[str, Any]:
        d = {"preset": self.preset, "phantom_count": self.phantom_count, "prior_count": self.prior_count,
             "phantom_preset": self.phantom_preset}
        d.update(self.model.to_dict())
        d.update(self.train.to_dict())
        return d


def from_flat(d: dict[str, Any] | None) -> RunConfig:
    d = dict(d or {})
    unknown = sorted(set(d) - set(RUN_KEYS) - set(MODEL_KEYS) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {unknown}")
    preset = d.pop("preset", "desk")
    if preset not in ("desk", "full"):
        raise ConfigurationError(f"preset must be desk or full, got {preset!r}")
    run = {k: d.pop(k, v) for k, v in RUN_KEYS.items() if k != "preset"}
    model_over = {k: d[k] for k in MODEL_KEYS if k in d}
    train_over = {k: d[k] for k in TRAIN_KEYS if k in d}
    base_m = ModelConfig.desk() if preset == "desk" else ModelConfig.full()
    base_t = TrainConfig.desk() if preset == "desk" else TrainConfig.full()
    model = ModelConfig.from_dict({**base_m.to_dict(), **model_over}).validate()
    train = TrainConfig.from_dict({**base_t.to_dict(), **train_over}).validate()
    return RunConfig(model, train, preset, int(run["phantom_count"]), int(run["prior_count"]), str(run["phantom_preset"]))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_flat({})
    data = yaml.safe_load(Path(path).read_text())
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a flat key/value mapping")
    return from_flat(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True))


def describe_defaults() -> str:
    """Text block listing every key with its desk and full default."""
    desk, full = from_flat({"preset": "desk"}).to_flat(), from_flat({"preset": "full"}).to_flat()
    width = max(map(len, desk))
    lines = [f"  {'key'.ljust(width)}  desk / full"]
    for k in desk:
        a, b = desk[k], full[k]
        lines.append(f"  {k.ljust(width)}  {a}" + ("" if a == b else f" / {b}"))
    return "\n".join(lines)

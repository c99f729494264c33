"""Experiment configuration: YAML file <-> dataclasses, strict on unknown keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .trainer import ConfigError, OptimConfig

EXPERIMENTS = ("pairs-mnist", "autoencoder-mnist", "cifar-quick", "covariance-vs-datasize")


@dataclass
class DataConfig:
    data_dir: str = "data/mnist"
    # side-by-side pairs
    train_pairs: int = 10000
    val_pairs: int = 2000
    test_pairs: int = 2000
    # single-image experiments; None uses every available image
    train_limit: int | None = None
    val_count: int = 1000
    test_limit: int | None = None
    data_seed: int = 1234


@dataclass
class ModelConfig:
    architecture: str = "lenet-dual"
    hidden_units: int = 500
    init: str = "uniform"
    init_std: float = 0.01


@dataclass
class CellConfig:
    name: str
    decov_weight: float = 0.0
    dropout_p: float = 0.0


@dataclass
class GridConfig:
    decov_weight: list = field(default_factory=lambda: [0.0])
    dropout_p: list = field(default_factory=lambda: [0.0])
    weight_decay: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "results"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    cells: list = field(default_factory=list)
    # L2-only baseline row: coefficients tried, best picked on validation
    weight_decay_grid: list = field(default_factory=list)
    fractions: list = field(default_factory=list)
    grid: GridConfig = field(default_factory=GridConfig)
    eval_every: int = 1
    train_eval_size: int | None = None

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate cell names in {names}")
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"fraction {f} outside (0, 1]")
        self.optim.validate()


_NESTED = {
    "data": DataConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "grid": GridConfig,
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    for key, cls in _NESTED.items():
        if key in raw:
            raw[key] = _build(cls, raw[key], key)
    if "cells" in raw:
        raw["cells"] = [_build(CellConfig, c, f"cells[{i}]") for i, c in enumerate(raw["cells"] or [])]
    cfg = _build(ExperimentConfig, raw, "config")
    cfg.validate()
    return cfg


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    if "optim" in d:
        d["optim"]["lr_schedule"] = [list(e) for e in d["optim"]["lr_schedule"]]
    return d


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]

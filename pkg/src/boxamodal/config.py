"""Training configuration and its YAML file format.

A config file is a YAML mapping whose keys mirror :class:`TrainConfig`;
nested ``loss``, ``model`` and ``eval`` mappings mirror
:class:`~boxamodal.losses.LossConfig`, :class:`~boxamodal.model.ModelConfig`
and :class:`~boxamodal.evaluation.EvalConfig`. Unknown keys are rejected.
Example::

    dataset: data/train
    output_dir: runs/full
    total_iterations: 6000
    batch_size: 8
    base_lr: 0.01
    milestones: [0.6667, 0.9]
    loss:
      alpha1_a: 2.0
      enable_neighbor: true
    model:
      channels: 32

``BOXAMODAL_DATA_ROOT`` and ``BOXAMODAL_OUTPUT_DIR`` override ``dataset`` and
``output_dir`` when set.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .evaluation import EvalConfig
from .losses import LossConfig
from .model import ModelConfig

ENV_DATA_ROOT = "BOXAMODAL_DATA_ROOT"
ENV_OUTPUT_DIR = "BOXAMODAL_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: Optional[str] = None
    output_dir: str = "runs/default"
    total_iterations: int = 6000
    batch_size: int = 8
    base_lr: float = 0.01
    milestones: tuple = (2.0 / 3.0, 0.9)
    lr_gamma: float = 0.1
    warmup_iterations: int = 100
    pairwise_warmup: float = 0.15
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: Optional[float] = 5.0
    visible_weight: float = 1.0
    amodal_weight: float = 1.0
    region_weight: float = 1.0
    loss_reduction: str = "mean"
    hflip: bool = True
    seed: int = 0
    checkpoint_every: int = 1000
    log_interval: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.total_iterations < 1 or self.batch_size < 1:
            raise ConfigError("total_iterations and batch_size must be positive")
        if list(self.milestones) != sorted(self.milestones) or not all(0 < m < 1 for m in self.milestones):
            raise ConfigError("milestones must be increasing fractions in (0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be 'mean' or 'sum'")
        if self.base_lr <= 0 or self.lr_gamma <= 0:
            raise ConfigError("base_lr and lr_gamma must be positive")
        if not 0.0 <= self.pairwise_warmup < 1.0:
            raise ConfigError("pairwise_warmup must be a fraction in [0, 1)")
        if self.log_interval < 1 or self.checkpoint_every < 0 or self.warmup_iterations < 0:
            raise ConfigError("log_interval must be >= 1; checkpoint_every, warmup_iterations >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["milestones"] = list(self.milestones)
        d["model"] = self.model.to_dict()
        return d

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("dataset")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return from_dict({**self.to_dict(), **changes})


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> TrainConfig:
    data = dict(data or {})
    nested = {
        "loss": _build(LossConfig, data.pop("loss", None), "loss"),
        "model": _build(ModelConfig, data.pop("model", None), "model"),
        "eval": _build(EvalConfig, data.pop("eval", None), "eval"),
    }
    cfg = _build(TrainConfig, {**data, **nested}, "config")
    return cfg


def apply_env(cfg: TrainConfig) -> TrainConfig:
    if os.environ.get(ENV_DATA_ROOT):
        cfg.dataset = os.environ[ENV_DATA_ROOT]
    if os.environ.get(ENV_OUTPUT_DIR):
        cfg.output_dir = os.environ[ENV_OUTPUT_DIR]
    return cfg


def load_config(path=None, overrides: Optional[dict] = None) -> TrainConfig:
    """Read a YAML config, apply dotted ``overrides`` (``{"loss.K": 2.0}``), then env vars."""
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return apply_env(from_dict(data))


def save_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path

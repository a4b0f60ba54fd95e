"""Configuration dataclasses and JSON/override handling."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from amb.corpus import ConfigError

MODES = ("amb", "mb", "mul-only")


@dataclass
class ModelDims:
    d_emb: int = 200
    d_h: int = 100   # per direction
    d_a: int = 100


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 0.1
    delta: float = 0.1
    lambda_adv: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name, value in dataclasses.asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class OptimizerConfig:
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-8
    clip_norm: float = 5.0


@dataclass
class DataConfig:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    min_count: int = 6
    max_sentences: int = 30
    max_tokens: int = 40


@dataclass
class TrainConfig:
    num_classes: int = 2
    model: ModelDims = field(default_factory=ModelDims)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    batch_size: int = 32
    epochs: int = 30
    patience: int = 5
    seed: int = 0
    mode: str = "amb"
    # let the adversarial gradient reach the encoders (off: only the adversarial attention)
    adv_through_encoder: bool = True
    out_dir: str = "run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("batch_size", "epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("d_emb", "d_h", "d_a"):
            if getattr(self.model, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        self.loss.validate()

    def effective_loss(self) -> LossWeights:
        """Loss weights after the ablation mode is applied."""
        w = dataclasses.replace(self.loss)
        if self.mode in ("mb", "mul-only"):
            w.gamma = 0.0
            w.delta = 0.0
        if self.mode == "mul-only":
            w.alpha = 0.0
        return w

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "TrainConfig":
        return _build(cls, raw, "")


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix}{key}")
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{prefix}{key}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


_NESTED = {
    (TrainConfig, "model"): ModelDims,
    (TrainConfig, "loss"): LossWeights,
    (TrainConfig, "optimizer"): OptimizerConfig,
    (TrainConfig, "data"): DataConfig,
}


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``dot.path=value`` overrides; values parse as JSON, else stay strings."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        path, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        *parents, leaf = path.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path} crosses a non-object")
        node[leaf] = value
    return raw


def load_config(path: str | Path, overrides: list[str] | None = None) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return TrainConfig.from_dict(apply_overrides(raw, overrides or []))

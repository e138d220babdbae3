"""Model/training configuration with strict JSON loading.

Unknown keys are rejected everywhere: a misspelt hyperparameter should
stop the run, not silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

from .numcore import DomainError

T = TypeVar("T")


class ConfigError(DomainError):
    pass


class FormatError(ConfigError):
    """A file exists but its contents are not what the reader expects."""


def from_dict(cls: type[T], data: dict[str, Any]) -> T:
    """Build dataclass ``cls`` from ``data``, recursing into nested dataclasses."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = _NESTED.get((cls.__name__, name))
        if sub is ModelConfig and isinstance(value, str):
            if value not in PRESETS:
                raise ConfigError(f"unknown model preset {value!r}; known: {', '.join(PRESETS)}")
            value = PRESETS[value]
        elif sub is not None:
            value = from_dict(sub, value)
        elif ftype in ("int", int) and not (isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigError(f"{cls.__name__}.{name}: expected int, got {value!r}")
        elif ftype in ("float", float) and not isinstance(value, (int, float)):
            raise ConfigError(f"{cls.__name__}.{name}: expected number, got {value!r}")
        elif ftype in ("float", float):
            value = float(value)
        elif ftype in ("bool", bool) and not isinstance(value, bool):
            raise ConfigError(f"{cls.__name__}.{name}: expected bool, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def to_dict(obj) -> dict[str, Any]:
    return dataclasses.asdict(obj)


@dataclass(frozen=True)
class ModelConfig:
    """Layer sizes and the numeric floors of the edge parameterisation."""

    d_in: int = 8
    n_classes: int = 8
    enc_layers: int = 2
    enc_hidden: int = 32
    d_node: int = 16
    edge_layers: int = 2          # dense layers per edge MLP (hidden layers + output)
    edge_hidden: int = 32
    pair_layers: int = 2          # dense layers in the pair network feeding the embedding
    pair_hidden: int = 32
    d_embed: int = 16
    rtn_layers: int = 2
    rtn_hidden: int = 32
    use_graph: bool = True
    embed_every_layer: bool = False
    dropout: float = 0.0
    epsilon: float = 0.01         # floor on n = softplus(.) + epsilon
    epsilon_sigma: float = 0.01   # floor on every predicted standard deviation
    epsilon_alpha: float = 1e-4   # lower clamp on summary-edge samples
    transform_mu_bias: float = 0.0
    transform_sigma_bias: float = 0.0

    def __post_init__(self):
        for name in ("d_in", "n_classes", "enc_layers", "enc_hidden", "d_node", "edge_layers",
                     "edge_hidden", "pair_layers", "pair_hidden", "d_embed", "rtn_layers",
                     "rtn_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("ModelConfig.n_classes must be >= 2")
        if not 0 <= self.dropout < 1:
            raise ConfigError("ModelConfig.dropout must lie in [0, 1)")
        if min(self.epsilon, self.epsilon_sigma, self.epsilon_alpha) <= 0:
            raise ConfigError("epsilon floors must be positive")


@dataclass(frozen=True)
class TrainConfig:
    o: int = 9
    beta: float = 0.0005
    lr: float = 0.2
    epochs: int = 40
    batch_size: int = 4
    heldout: int = 50
    seed: int = 0
    momentum: float = 0.0
    grad_clip: float = 1.0        # global-norm clip; 0 disables
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.o < 1:
            raise ConfigError("TrainConfig.o must be >= 1")
        if self.beta < 0:
            raise ConfigError("TrainConfig.beta must be >= 0")
        if self.lr < 0:
            raise ConfigError("TrainConfig.lr must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.heldout < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, heldout >= 0 required")
        if not 0 <= self.momentum < 1:
            raise ConfigError("TrainConfig.momentum must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ConfigError("TrainConfig.grad_clip must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        model_changes = changes.pop("model_changes", None)
        cfg = dataclasses.replace(self, **changes)
        if model_changes:
            cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **model_changes))
        return cfg


_NESTED = {("TrainConfig", "model"): ModelConfig}

PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "full-scale": ModelConfig(d_in=40, enc_layers=6, enc_hidden=1024, d_node=128, edge_layers=3,
                              edge_hidden=128, pair_layers=3, pair_hidden=128, d_embed=128,
                              rtn_layers=9, rtn_hidden=1024, dropout=0.1),
}


def load_json(path: str | Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc


def load_train_config(path: str | Path) -> TrainConfig:
    return from_dict(TrainConfig, load_json(path))

"""Experiment configuration: one TOML or JSON document drives every command."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from attnseg.attention import AttentionConfig
from attnseg.data.phantom import PhantomParams
from attnseg.discriminator import DiscriminatorConfig
from attnseg.errors import ConfigurationError
from attnseg.generator import GeneratorConfig
from attnseg.losses import LossWeights

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataConfig:
    path: str | None = None  # dataset directory; synthesized in memory when unset
    n_subjects: int = 40
    scans_per_subject: int = 5
    window: int = 64
    overlap: float = 0.75
    min_foreground: float = 0.0
    augment: bool = True
    max_angle: float = 15.0
    guided_layers: list[int] = field(default_factory=lambda: list(range(1, 8)))
    phantom: PhantomParams = field(default_factory=lambda: PhantomParams(vessel_count=(0, 2)))


@dataclass
class ModelConfig:
    base_width: int = 32
    n_residual: int = 4
    n_stages: int = 2
    n_classes: int = 8


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    folds: int = 5
    debug_checks: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if self.folds < 2:
            raise ConfigurationError("folds must be >= 2")
        self.generator_config().validate()
        self.discriminator.validate()
        self.loss.validate()

    def generator_config(self) -> GeneratorConfig:
        scale = 2**self.model.n_stages
        if self.data.window % scale:
            raise ConfigurationError(
                f"data.window {self.data.window} must be divisible by 2**n_stages = {scale}"
            )
        side = self.data.window // scale
        return GeneratorConfig(
            input_size=(side, side),
            base_width=self.model.base_width,
            n_residual=self.model.n_residual,
            n_stages=self.model.n_stages,
            n_classes=self.model.n_classes,
            attention=self.attention,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"attention.kind": "serial"})``."""
        data = self.to_dict()
        for key, value in overrides.items():
            set_dotted(data, key, value)
        return from_dict(data)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path}: expected a table, got {type(value).__name__}")
        return _build(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list")
        elem = args[0] if args else typing.Any
        out = [_coerce(elem, v, path) for v in value]
        return tuple(out) if origin is tuple else out
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = prefix or "top level"
        raise ConfigurationError(f"unknown config key(s) at {where}: {', '.join(unknown)}")
    kwargs = {
        k: _coerce(hints[k], v, f"{prefix}.{k}" if prefix else k) for k, v in data.items()
    }
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        data = tomllib.loads(text)
    return from_dict(data)


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"unknown config key: {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config key: {key}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as JSON when possible, else a bare string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def config_keys(cls=ExperimentConfig, prefix: str = "") -> list[str]:
    keys = []
    for f in dataclasses.fields(cls):
        name = f"{prefix}{f.name}"
        tp = typing.get_type_hints(cls)[f.name]
        if dataclasses.is_dataclass(tp):
            keys += config_keys(tp, name + ".")
        else:
            keys.append(name)
    return keys

"""Experiment configuration: validation, canonical serialization, hashing.

A config file is a YAML (or JSON) mapping whose keys are the field names of
:class:`TrainConfig`; omitted keys take the defaults below.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from ..adapters import Kind
from ..errors import ConfigError

TASKS = ("teacher_student", "blobs")


@dataclass(frozen=True)
class TrainConfig:
    # task
    task: str = "teacher_student"
    n: int = 16
    m: int = 12
    hidden: int = 16
    classes: int = 4
    samples: int = 512
    noise_std: float = 0.01
    a_star_scale: float = 1.2  # planted alpha as a multiple of ||W_base||_F
    b_star: float = 1.0
    blob_radius: float = 2.0
    blob_std: float = 1.0
    # adapter
    kind: str = "map"
    r: int = 2
    lora_alpha: Optional[float] = None
    beta_init: float = 1.0
    b_init_std: float = 1e-3
    dropout_p: float = 0.0
    # optimization
    optimizer: str = "adamw"
    lr: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 100
    epochs: int = 3
    steps: Optional[int] = None  # overrides epochs when set
    batch_size: int = 16
    opt_mode: str = "joint"
    period: Optional[int] = None  # stepwise phase length; default one epoch
    seed: int = 0
    record_timing: bool = False

    def __post_init__(self):
        problems = list(_problems(self))
        if problems:
            raise ConfigError("invalid config: " + "; ".join(problems))

    @property
    def adapter_kind(self) -> Kind:
        return Kind.parse(self.kind)

    @property
    def layer_sizes(self) -> list[int]:
        if self.task == "teacher_student":
            return [self.n, self.m]
        return [self.n, self.hidden, self.classes]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        coerced = {}
        for key, value in data.items():
            coerced[key] = _coerce(key, value, names[key].default)
        return cls(**coerced)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def load_config(path, **overrides) -> TrainConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


_INT_FIELDS = {"n", "m", "hidden", "classes", "samples", "r", "warmup_steps", "epochs", "steps",
               "batch_size", "period", "seed"}
_OPTIONAL = {"lora_alpha", "steps", "period"}


def _coerce(key, value, default):
    if value is None and key in _OPTIONAL:
        return None
    try:
        if key in _INT_FIELDS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(default, float) or key == "lora_alpha":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r}") from None


def _problems(c: TrainConfig):
    if c.task not in TASKS:
        yield f"task must be one of {TASKS}, got {c.task!r}"
    try:
        Kind.parse(c.kind)
    except ValueError:
        yield f"kind must be one of {[k.value for k in Kind]}, got {c.kind!r}"
    for name in ("n", "m", "hidden", "r", "samples", "epochs", "batch_size"):
        if getattr(c, name) < 1:
            yield f"{name} must be >= 1"
    if c.classes < 2:
        yield "classes must be >= 2"
    if c.task == "blobs" and c.n < 2:
        yield "blobs need n >= 2"
    if c.r > min(c.layer_sizes):
        yield f"r={c.r} exceeds the smallest layer dimension {min(c.layer_sizes)}"
    if c.samples < 5:
        yield "samples must be >= 5 so the 20% validation split is non-empty"
    for name in ("noise_std", "b_init_std", "weight_decay", "blob_std"):
        if not getattr(c, name) >= 0:
            yield f"{name} must be >= 0"
    for name in ("lr", "eps", "blob_radius"):
        if not getattr(c, name) > 0:
            yield f"{name} must be > 0"
    if c.lora_alpha is not None and not c.lora_alpha > 0:
        yield "lora_alpha must be > 0"
    if not 0 <= c.dropout_p < 1:
        yield "dropout_p must lie in [0, 1)"
    for name in ("beta1", "beta2"):
        if not 0 <= getattr(c, name) < 1:
            yield f"{name} must lie in [0, 1)"
    if c.optimizer not in ("adamw", "sgd"):
        yield f"optimizer must be 'adamw' or 'sgd', got {c.optimizer!r}"
    if c.opt_mode not in ("joint", "stepwise"):
        yield f"opt_mode must be 'joint' or 'stepwise', got {c.opt_mode!r}"
    if c.period is not None and c.period < 1:
        yield "period must be >= 1"
    if c.steps is not None and c.steps < 0:
        yield "steps must be >= 0"
    if c.warmup_steps < 0:
        yield "warmup_steps must be >= 0"
    for name in ("a_star_scale", "b_star", "beta_init", "lr", "noise_std"):
        if not math.isfinite(getattr(c, name)):
            yield f"{name} must be finite"

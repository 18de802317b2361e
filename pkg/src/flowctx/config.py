"""Run configuration: defaults, a flat ``key=value`` file, and CLI overrides.

Precedence is command line > config file > default. Unknown keys in a file
are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import List, Optional


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    pcaps: List[str] = field(default_factory=list)
    labels: Optional[str] = None
    flows: Optional[str] = None
    model: Optional[str] = None
    embed_model: Optional[str] = None
    out: Optional[str] = None
    # flow extraction
    idle_timeout: float = 120.0
    active_timeout: float = 3600.0
    duration_floor: float = 1e-3
    # clustering and sampling
    eps: float = 0.3
    min_pts: int = 10
    downsample_rate: float = 0.02
    kdist_k: Optional[int] = None
    # embedding training
    margin: float = 1.0
    embed_epochs: int = 150
    embed_batch_size: int = 256
    embed_lr: float = 1e-3
    # detector training
    detector_epochs: int = 30
    detector_batch_size: int = 512
    detector_lr: float = 1e-3
    optimizer: str = "adam"
    # evaluation
    seed: int = 0
    folds: int = 3
    tau: float = 0.01
    bench_iters: int = 1000
    bench_warmup: int = 100

    def validate(self):
        if self.idle_timeout <= 0 or self.active_timeout <= 0:
            raise ConfigError("timeouts must be positive")
        if self.eps <= 0 or self.min_pts < 1:
            raise ConfigError("eps must be positive and min_pts >= 1")
        if not 0 < self.downsample_rate <= 1:
            raise ConfigError("downsample_rate must be in (0, 1]")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if self.embed_epochs < 1 or self.detector_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _coerce(name, text):
    f = FIELD_TYPES[name]
    default = RunConfig().__getattribute__(name)
    try:
        if name == "pcaps":
            return [p.strip() for p in text.split(",") if p.strip()]
        if f.type in ("Optional[str]", "str"):
            return text or None
        if name == "kdist_k":
            return int(text) if text else None
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    for key, value in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            values[key] = value
    return RunConfig(**values).validate()

"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .graph_store import SECONDS_PER_DAY
from .training import TrainConfig
from .units import HyperParams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    d: int = 64
    tau: float = 50.0
    act: str = "tanh"
    decay: str = "reciprocal_log"
    propagation: bool = True
    time_intervals: bool = True
    attention: bool = True
    # training
    batch_size: int = 200
    q: int = 5
    lr: float = 1e-3
    epochs: int = 1
    optimizer: str = "adam"
    seed: int = 0
    task: str = "link_prediction"
    labeled_fraction: float = 1.0
    literal_negatives: bool = False
    # evaluation and input
    feature_mode: str = "projected"
    exclude_self: bool = False
    time_scale: float = SECONDS_PER_DAY

    def __post_init__(self):
        if self.feature_mode not in ("projected", "original"):
            raise ConfigError(f"feature_mode must be projected or original, got {self.feature_mode!r}")
        if self.time_scale <= 0:
            raise ConfigError("time_scale must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        try:
            self.hyper()
            self.train()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def hyper(self) -> HyperParams:
        return HyperParams(**{f.name: getattr(self, f.name) for f in fields(HyperParams)})

    def train(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
    return values


def load_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        values = parse_config(p.read_text(encoding="utf-8"), str(p))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"

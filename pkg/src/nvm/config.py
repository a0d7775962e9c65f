"""Run configuration: nested dataclasses loaded from JSON with strict keys."""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .networks import NetConfig
from .simworld.terrain import KINDS
from .training import AugmentConfig, TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entries."""


@dataclass
class DataConfig:
    kinds: list = field(default_factory=lambda: ["stairs"])
    episodes: int = 64
    steps: int = 200
    difficulty: float = 0.5
    preset: typing.Optional[str] = None
    jitter: float = 0.03
    corrected_forward: bool = False


@dataclass
class GridConfig:
    scale: float = 0.5
    center_forward: typing.Optional[float] = None


@dataclass
class EvalConfig:
    terrains: list = field(default_factory=lambda: ["stages", "stairs", "stones", "obstacles"])
    episodes: int = 8
    difficulty: float = 0.5
    steps: int = 300


@dataclass
class PathsConfig:
    data: str = "data"
    out: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        if is_dataclass(hint):
            kwargs[name] = _build(hint, value, path)
        elif isinstance(value, list) and hint is not list:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    bad = [k for k in cfg.data.kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"data.kinds: unknown terrain kinds {bad}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)

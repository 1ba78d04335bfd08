"""Run configuration: strict JSON round-trip, CLI flags override fields."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .denoiser import DenoiserConfig
from .rewards import DEFAULT_WEIGHTS
from .rl import PpoConfig
from .synthworld import WorldConfig

__all__ = ["ScheduleConfig", "PretrainConfig", "RunConfig", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 500
    precision: float = 1e-4


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 5000
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = dict(data)
    for f in fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    reward_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    seed: int = 0
    out_dir: str = "runs"

    SECTIONS = {
        "world": WorldConfig,
        "schedule": ScheduleConfig,
        "denoiser": DenoiserConfig,
        "ppo": PpoConfig,
        "pretrain": PretrainConfig,
    }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root: expected an object")
        known = set(cls.SECTIONS) | {"reward_weights", "seed", "out_dir"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"config root: unknown keys {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in cls.SECTIONS.items():
            if name in data:
                kwargs[name] = _from_dict(section_cls, data[name], name)
        if "reward_weights" in data:
            w = data["reward_weights"]
            if not isinstance(w, dict) or not all(
                isinstance(v, (int, float)) for v in w.values()
            ):
                raise ConfigError("reward_weights: expected a name -> number map")
            kwargs["reward_weights"] = {k: float(v) for k, v in w.items()}
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        if "out_dir" in data:
            kwargs["out_dir"] = str(data["out_dir"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

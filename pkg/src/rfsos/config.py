"""Run configuration for the command-line tool (JSON files, strict keys)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .systems import SYSTEMS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


@dataclass
class SystemConfig:
    name: str = "van_der_pol"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SYSTEMS:
            raise ValueError(f"unknown system {self.name!r}; choose from {sorted(SYSTEMS)}")


@dataclass
class DataConfig:
    N0: int = 2000
    N: int = 10000
    horizon: int = 10
    burn_in: int = 0
    explore_frac: float = 0.5
    explore_box: tuple[float, float] = (0.1, 0.9)
    sigma_inflation: float = 3.0
    clamp_eps: float = 1e-6
    val_frac: float = 0.1

    def __post_init__(self):
        if self.N0 < 2 or self.N < 0:
            raise ValueError("need N0 >= 2 and N >= 0")
        if not 0.0 <= self.explore_frac <= 1.0 or not 0.0 <= self.val_frac < 1.0:
            raise ValueError("explore_frac must be in [0, 1] and val_frac in [0, 1)")
        lo, hi = self.explore_box
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("explore_box must satisfy 0 < lo < hi < 1")
        self.explore_box = (float(lo), float(hi))


@dataclass
class PropagateConfig:
    K: int = 9
    grid_points: int = 50
    marginals: list = field(default_factory=lambda: [[0, 1]])

    def __post_init__(self):
        if self.K < 0 or self.grid_points < 2:
            raise ValueError("K must be >= 0 and grid_points >= 2")
        self.marginals = [tuple(int(v) for v in pair) for pair in self.marginals]


@dataclass
class EvaluateConfig:
    mc_particles: int = 5000

    def __post_init__(self):
        if self.mc_particles < 1:
            raise ValueError("mc_particles must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    plots: bool = True
    system: SystemConfig = field(default_factory=SystemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    propagate: PropagateConfig = field(default_factory=PropagateConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {"system": SystemConfig, "data": DataConfig, "train": TrainConfig,
                    "propagate": PropagateConfig, "evaluate": EvaluateConfig}
        top = {k: v for k, v in data.items() if k not in sections}
        cfg = _strict(cls, top, "top level")
        for name, sec in sections.items():
            if name in data:
                setattr(cfg, name, _strict(sec, data[name], name))
        cfg.train.seed = cfg.seed
        return cfg


def load_config(path=None, seed: int | None = None, out: str | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    return RunConfig.from_dict(data)

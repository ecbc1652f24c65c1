"""Run configuration: defaults, JSON loading, validation.

A config file is a flat JSON object whose keys match :class:`RunConfig`
fields; CLI flags override file values, and the file overrides the built-in
defaults below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .calib import BUDGETS
from .errors import ConfigError

DEFAULT_DELTA_GRID = tuple(round(0.01 * i, 10) for i in range(1, 11))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    fractions: tuple = (0.6, 0.1, 0.15, 0.15)
    delta: float = 0.05
    budget: str = "per_exit"
    costs: tuple | None = None  # None -> normalized depth for the record K
    deltas: tuple = DEFAULT_DELTA_GRID
    mc_trials: int = 200
    cal_fraction: float = 0.5
    ece_bins: int = 15
    epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 0.01
    warmup_fraction: float = 0.1
    weight_decay: float = 1e-4
    ema_momentum: float = 0.999
    alpha: float = 1.0
    beta: float = 0.5
    temperature: float = 4.0
    widths: tuple = (64, 64, 64)

    def __post_init__(self) -> None:
        if len(self.fractions) != 4 or any(f < 0 for f in self.fractions):
            raise ConfigError("fractions must be 4 non-negative reals")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions sum to {sum(self.fractions)!r}, expected 1")
        if self.budget not in BUDGETS:
            raise ConfigError(f"unknown budget {self.budget!r}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta {self.delta!r} outside (0, 1)")
        if not self.deltas or any(not 0.0 < d < 1.0 for d in self.deltas):
            raise ConfigError("delta grid values must lie in (0, 1)")
        if any(b <= a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ConfigError("delta grid must be strictly increasing")
        if self.mc_trials < 1:
            raise ConfigError("mc_trials must be >= 1")
        if not 0.0 < self.cal_fraction < 1.0:
            raise ConfigError(f"cal_fraction {self.cal_fraction!r} outside (0, 1)")
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.costs is not None:
            object.__setattr__(self, "costs", tuple(float(c) for c in self.costs))


def _normalize_budget(value: str) -> str:
    return value.replace("-", "_")


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "budget" in data:
        data = dict(data)
        data["budget"] = _normalize_budget(str(data["budget"]))
    for key in ("fractions", "deltas", "widths", "costs"):
        if key in data and data[key] is not None:
            data[key] = tuple(data[key])
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return config_from_dict(data)


def override(cfg: RunConfig, **updates) -> RunConfig:
    updates = {k: v for k, v in updates.items() if v is not None}
    if not updates:
        return cfg
    if "budget" in updates:
        updates["budget"] = _normalize_budget(str(updates["budget"]))
    return replace(cfg, **updates)

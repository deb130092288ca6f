"""Run configuration: presets, TOML/JSON loading, serialization."""
from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cstr import ConfigurationError
from .koopman import SiConfig
from .pinn import EnsembleConfig
from .ppo import PpoConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

FULL_SCHEDULE = [20] * 10 + [50] * 6 + [250] * 8
DESK_SCHEDULE = [20] * 5 + [50] * 6
VARIANT_IDS = ("main", "rl_bounds", "si_koop", "pirl_mlp", "rl_mlp")


@dataclass
class EvalConfig:
    windows: int = 10
    steps: int = 168
    every: int = 0           # evaluate after every n-th MBPO iteration; 0 = final only

    def __post_init__(self):
        if self.windows < 1 or self.steps < 1 or self.every < 0:
            raise ConfigurationError("evaluation settings must be positive")


@dataclass
class RunConfig:
    variant: str = "main"
    seed: int = 0
    schedule: list = field(default_factory=lambda: list(FULL_SCHEDULE))
    prices: str = "synthetic"     # or a CSV path
    eval_start: str = "2018-03-26T00:00"
    sigma_max: float = 0.1
    log_sigma: float = float(np.log(0.05))
    slack_penalty: float = 1e3
    control_reg: float = 1e-6
    out_dir: str = "runs"
    koopman: SiConfig = field(default_factory=SiConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.variant not in VARIANT_IDS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {VARIANT_IDS}")
        if not self.schedule or any(int(b) < 1 for b in self.schedule):
            raise ConfigurationError("schedule must be a non-empty list of positive budgets")
        if not 0.0 <= self.sigma_max:
            raise ConfigurationError("sigma_max must be non-negative")

    @property
    def total_steps(self) -> int:
        return int(sum(self.schedule))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        preset = doc.pop("preset", None)
        base = preset_dict(preset) if preset else {}
        return _build(cls, _merge(base, doc))


_NESTED = {"koopman": SiConfig, "ensemble": EnsembleConfig, "ppo": PpoConfig, "eval": EvalConfig}


def _build(cls, doc: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in doc.items():
        sub = _NESTED.get(k) if cls is RunConfig else None
        kwargs[k] = _build(sub, v) if sub is not None and isinstance(v, dict) else v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


PRESETS = {
    "full": {},
    # scaled-down analog for a desktop CPU: 400 real steps, 3 members,
    # short PPO phases
    "desk": {
        "schedule": DESK_SCHEDULE,
        "koopman": {"max_epochs": 2000},
        "ensemble": {"n_members": 3, "adam_epochs": 300, "lbfgs_epochs": 100,
                     "n_colloc": 1000, "n_init": 50},
        "ppo": {"n_steps": 256, "batch_size": 64, "n_epochs": 10, "check_every": 2,
                "window": 6, "n_val_envs": 10, "val_episodes": 2, "max_iterations": 12},
        "eval": {"windows": 3},
    },
    # tiny smoke profile for tests and demos
    "smoke": {
        "schedule": [20, 20],
        "koopman": {"max_epochs": 30},
        "ensemble": {"n_members": 2, "adam_epochs": 5, "lbfgs_epochs": 3,
                     "n_colloc": 50, "n_init": 10},
        "ppo": {"n_steps": 16, "batch_size": 8, "n_epochs": 1, "check_every": 1,
                "window": 2, "n_val_envs": 2, "val_episodes": 1, "max_iterations": 2},
        "eval": {"windows": 1, "steps": 12},
    },
}


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return json.loads(json.dumps(PRESETS[name]))


def preset(name: str, **overrides) -> RunConfig:
    return RunConfig.from_dict({"preset": name, **overrides})


def load_config(path) -> RunConfig:
    """Read a TOML or JSON run configuration (``preset = "..."`` is allowed)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    return RunConfig.from_dict(doc)


def save_config(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1))

"""Run configuration: validated records for every tunable the trainer has.

Configs are plain nested dataclasses loaded from a YAML tree. Loading is
strict: unknown keys are rejected, missing required keys are named, and
every physically meaningless value (negative radii, gamma >= 1, ...) fails
before any resources are allocated. Command-line overrides use dotted paths,
e.g. ``trainer.total_steps=1000``.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .envs import ChainEnv, HazardWorld, HazardWorldConfig, bridge_chain_spec
from .errors import ConfigError
from .mpo import MpoConfig
from .wapid import MODES

VARIANTS = ("cdmpo", "cdmpo-no-cdcl", "dmpo-lag", "mpo-lag")

__all__ = [
    "VARIANTS",
    "NetConfig",
    "GridConfig",
    "WapidSettings",
    "TrainerConfig",
    "ChainSettings",
    "EnvConfig",
    "RunConfig",
    "load_run_config",
    "run_config_from_dict",
    "config_to_dict",
    "apply_overrides",
    "make_env",
]


@dataclass
class NetConfig:
    hidden: tuple[int, ...] = (256, 256)
    critic_lr: float = 1e-3
    policy_lr: float = 5e-4
    critic_activation: str = "relu"
    policy_activation: str = "tanh"
    scale_floor: float = 0.01
    target_tau: float = 0.005

    def __post_init__(self) -> None:
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden sizes must be positive")
        if min(self.critic_lr, self.policy_lr) <= 0.0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.target_tau <= 1.0:
            raise ConfigError("target_tau must be in (0, 1]")
        if self.scale_floor <= 0.0:
            raise ConfigError("scale_floor must be positive")


@dataclass
class GridConfig:
    """Atom grids for the two critics. Unset bounds fall back to
    [0, r_max / (1 - gamma)] for reward and [0, episode length] for cost."""

    n_atoms: int = 51
    q_v_min: float | None = None
    q_v_max: float | None = None
    c_v_min: float | None = None
    c_v_max: float | None = None

    def __post_init__(self) -> None:
        if self.n_atoms < 2:
            raise ConfigError("n_atoms must be at least 2")


@dataclass
class WapidSettings:
    k_p: float = 0.1
    k_i: float = 0.01
    k_d: float = 0.01
    w: float = 0.1
    rectified_integral: bool = True
    window: int = 10
    signal: str = "episodic"

    def __post_init__(self) -> None:
        if min(self.k_p, self.k_i, self.k_d) < 0.0:
            raise ConfigError("controller gains must be non-negative")
        if not 0.0 < self.w <= 1.0:
            raise ConfigError("w must be in (0, 1]")
        if self.window < 1:
            raise ConfigError("cost window must be positive")
        if self.signal not in ("episodic", "critic"):
            raise ConfigError(f"unknown cost signal {self.signal!r}")


@dataclass
class TrainerConfig:
    d: float
    total_steps: int
    variant: str = "cdmpo"
    controller: str = "wapid"
    n_candidates: int = 10
    gamma: float = 0.99
    batch_size: int = 256
    buffer_capacity: int = 100_000
    warmup_steps: int = 0
    steps_per_iteration: int = 400
    grad_steps_per_iteration: int = 100
    eval_interval: int = 0
    eval_episodes: int = 10
    eval_conservative: bool = True
    beta: float = 1.0
    n_cdcl_samples: int = 8
    conservative_backup: bool = True
    pin_lambda: float | None = None
    seed: int = 0
    checkpoint_interval: int = 0
    nets: NetConfig = field(default_factory=NetConfig)
    grids: GridConfig = field(default_factory=GridConfig)
    wapid: WapidSettings = field(default_factory=WapidSettings)
    mpo: MpoConfig = field(default_factory=MpoConfig)

    def __post_init__(self) -> None:
        if self.d <= 0.0:
            raise ConfigError(f"cost threshold d must be positive, got {self.d}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be at least 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.controller not in MODES:
            raise ConfigError(f"controller must be one of {MODES}")
        if self.beta < 0.0:
            raise ConfigError("beta must be non-negative")
        for name in (
            "total_steps",
            "batch_size",
            "buffer_capacity",
            "steps_per_iteration",
            "grad_steps_per_iteration",
            "n_cdcl_samples",
            "eval_episodes",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.pin_lambda is not None and self.pin_lambda < 0.0:
            raise ConfigError("pin_lambda must be non-negative")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be non-negative")


@dataclass
class ChainSettings:
    preset: str = "bridge"
    horizon: int = 100

    def __post_init__(self) -> None:
        if self.preset != "bridge":
            raise ConfigError(f"unknown chain preset {self.preset!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")


@dataclass
class EnvConfig:
    name: str
    chain: ChainSettings = field(default_factory=ChainSettings)
    hazardworld: HazardWorldConfig = field(default_factory=HazardWorldConfig)

    def __post_init__(self) -> None:
        if self.name not in ("chain", "hazardworld"):
            raise ConfigError(f"env.name must be 'chain' or 'hazardworld', got {self.name!r}")


@dataclass
class RunConfig:
    env: EnvConfig
    trainer: TrainerConfig
    out_dir: str | None = None


def make_env(env_cfg: EnvConfig, gamma: float, seed: int):
    """Instantiate the configured environment with its own seed."""
    if env_cfg.name == "chain":
        spec = bridge_chain_spec(gamma=gamma, horizon=env_cfg.chain.horizon)
        return ChainEnv(spec, seed=seed)
    return HazardWorld(env_cfg.hazardworld, seed=seed)


# --- strict construction from plain dicts --------------------------------------


def _coerce(value, annotation, path: str):
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(annotation)
        elem = args[0] if args else float
        return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported config value type")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in field_map:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for name, f in field_map.items():
        sub_path = f"{path}.{name}" if path else name
        annotation = hints[name]
        if name in data:
            value = data[name]
            if dataclasses.is_dataclass(annotation):
                kwargs[name] = _build(annotation, value, sub_path)
            else:
                kwargs[name] = _coerce(value, annotation, sub_path)
        elif (
            f.default is dataclasses.MISSING
            and f.default_factory is dataclasses.MISSING
        ):
            raise ConfigError(f"missing required config key: {sub_path}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or 'config'}: {err}") from err


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments onto a nested dict tree."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a scalar")
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def run_config_from_dict(data: dict, overrides=()) -> RunConfig:
    data = apply_overrides(dict(data), overrides)
    return _build(RunConfig, data, "")


def load_run_config(path: str | Path, overrides=()) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse config {path}: {err}") from err
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return run_config_from_dict(data, overrides)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-type tree suitable for YAML round-tripping."""
    return _plain(cfg)

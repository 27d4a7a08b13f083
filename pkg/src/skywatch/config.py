"""Experiment configuration: YAML file, environment overrides, validation.

Every numeric setting lives here; the command-line front end only picks a
subcommand and overrides seed, output directory and trial count. Values
may also be overridden with environment variables named
``SKYWATCH_<SECTION>__<KEY>`` (or ``SKYWATCH_SEED`` / ``SKYWATCH_OUT``);
their text is parsed as YAML, so ``[80, 160]`` or ``1e-3`` work.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .exceptions import ConfigError
from .world import WorldConfig

ENV_PREFIX = "SKYWATCH_"

# desk-scale geometry: a wide placement disk around the 12 synthetic blocks
DESK_WORLD = {"station_xy": [0.0, 0.0], "placement_radius_m": 8000.0, "grid_spacing_m": 500.0,
              "comm_range_m": 500.0, "sensing_range_m": 100.0, "deterrence_range_m": 80.0,
              "uav_total": 20, "block_count": 12}


def _coerce(cls, data: dict, name: str) -> dict:
    """Convert values to the type of each field's default.

    YAML reads ``1e-3`` as a string, so numeric fields accept numeric text.
    """
    out = dict(data)
    for f in fields(cls):
        if f.name not in out or out[f.name] is None:
            continue
        default, value = f.default, out[f.name]
        try:
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ValueError("expected true or false")
            elif isinstance(default, int):
                as_float = float(value)
                if as_float != int(as_float):
                    raise ValueError("expected an integer")
                out[f.name] = int(as_float)
            elif isinstance(default, float):
                out[f.name] = float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {f.name}: {exc}") from exc
    return out


def _section(cls, data: Mapping | None, name: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    data = _coerce(cls, data, name)
    try:
        obj = cls(**data)
    except TypeError as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc
    obj.validate(name)
    return obj


def _year_pair(value, what: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be a [first, last] pair of years") from exc
    if a > b:
        raise ConfigError(f"{what}: first year {a} is after last year {b}")
    return a, b


@dataclass
class DataSection:
    csv: str | None = None            # raw crime CSV; None generates synthetic records
    geometry: str | None = None       # block geometry YAML; None uses the synthetic tiling
    schema: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    major_types: list | None = None
    region: int = 6
    weekday: int = 4
    window_start: str = "19:00"
    train_years: list = field(default_factory=lambda: [2005, 2013])
    test_years: list = field(default_factory=lambda: [2014, 2016])
    policy_years: list = field(default_factory=lambda: [2011, 2013])

    def validate(self, name: str) -> None:
        tr = _year_pair(self.train_years, f"[{name}] train_years")
        te = _year_pair(self.test_years, f"[{name}] test_years")
        po = _year_pair(self.policy_years, f"[{name}] policy_years")
        if tr[1] >= te[0]:
            raise ConfigError(f"[{name}] train years must end before the test years start")
        if not (tr[0] < po[0] and po[1] <= tr[1]):
            raise ConfigError(f"[{name}] policy_years must lie inside train_years and leave "
                              "earlier years for the history")
        if not 0 <= self.weekday <= 6:
            raise ConfigError(f"[{name}] weekday must be 0..6")
        try:
            hh, mm = self.window_start.split(":")
            if not (0 <= int(hh) < 24 and 0 <= int(mm) < 60):
                raise ValueError
        except ValueError as exc:
            raise ConfigError(f"[{name}] window_start must be HH:MM") from exc
        from .crime import SchemaConfig
        from .synth import SyntheticCrimeConfig
        SchemaConfig.from_mapping(self.schema)
        unknown = set(self.synthetic) - set(SyntheticCrimeConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"[{name}] unknown synthetic keys {sorted(unknown)}")
        for path in (self.csv, self.geometry):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"[{name}] file not found: {path}")


@dataclass
class EnvSection:
    episode_cycles: int | None = None   # None: one episode per folded year

    def validate(self, name: str) -> None:
        if self.episode_cycles is not None and self.episode_cycles < 1:
            raise ConfigError(f"[{name}] episode_cycles must be at least 1")


@dataclass
class PredictorSection:
    hidden_units: int = 100
    window_len: int = 4
    epochs: int = 30
    batch_size: int = 100
    learning_rate: float = 1e-3
    standardize: bool = False

    def validate(self, name: str) -> None:
        if min(self.hidden_units, self.window_len, self.epochs, self.batch_size) < 1:
            raise ConfigError(f"[{name}] sizes and epochs must be positive")
        if not self.learning_rate > 0:
            raise ConfigError(f"[{name}] learning_rate must be positive")


@dataclass
class PpoSection:
    n_steps: int = 2048
    minibatch_size: int = 256
    epochs_per_update: int = 4
    learning_rate: float = 3e-3
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: int = 64
    activation: str = "tanh"
    normalize_obs: bool = True
    total_steps: int = 100_000
    plateau_window: int = 20
    plateau_tol: float = 0.01

    def validate(self, name: str) -> None:
        from .ppo import PPOAgent
        try:
            PPOAgent(**asdict(self))._validate()
        except ConfigError as exc:
            raise ConfigError(f"[{name}] {exc}") from exc


@dataclass
class SweepSection:
    ranges: list = field(default_factory=lambda: [80.0, 160.0, 320.0, 640.0, 1280.0])
    trials: int = 10
    deterministic: bool = False
    policy_template: str = "policy_r{range}.ckpt"

    def validate(self, name: str) -> None:
        if not self.ranges or any(not float(r) > 0 for r in self.ranges):
            raise ConfigError(f"[{name}] ranges must be a non-empty list of positive meters")
        if self.trials < 1:
            raise ConfigError(f"[{name}] trials must be at least 1")
        if "{range}" not in self.policy_template:
            raise ConfigError(f"[{name}] policy_template must contain {{range}}")


@dataclass
class DiSection:
    train_size: int = 6000
    test_size: int = 1000
    image_size: int = 16
    noise: float = 0.6
    channels: list = field(default_factory=lambda: [32, 64, 64, 64, 64])
    epochs: int = 8
    fine_tune_epochs: int = 6
    batch_size: int = 64
    learning_rate: float = 2e-3
    rates: list = field(default_factory=lambda: [0.1, 0.3, 0.5])
    plans: list = field(default_factory=lambda: [[1, 3], [1, 4]])
    p_grid: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    fixed_p: float = 0.5
    seeds: int = 10
    elements_per_packet: int = 1
    rescale: bool = False

    def validate(self, name: str) -> None:
        if min(self.train_size, self.test_size, self.epochs, self.batch_size, self.seeds) < 1:
            raise ConfigError(f"[{name}] sizes, epochs and seeds must be positive")
        if self.fine_tune_epochs < 0 or self.elements_per_packet < 1:
            raise ConfigError(f"[{name}] fine_tune_epochs >= 0 and elements_per_packet >= 1 required")
        if any(not 0.0 <= float(r) < 1.0 for r in self.rates):
            raise ConfigError(f"[{name}] dropout rates must lie in [0, 1)")
        if any(not 0.0 <= float(p) <= 1.0 for p in list(self.p_grid) + [self.fixed_p]):
            raise ConfigError(f"[{name}] loss rates must lie in [0, 1]")
        n_blocks = len(self.channels) + 1
        for plan in self.plans:
            if len(plan) != 2 or not 0 < plan[0] < plan[1] < n_blocks:
                raise ConfigError(f"[{name}] split {plan} needs 0 < a < b < {n_blocks}")
        side = self.image_size
        while side >= 2 and side % 2 == 0:
            side //= 2
        if self.image_size < 2 or side != 1:
            raise ConfigError(f"[{name}] image_size must be a power of two")


SECTIONS = {"data": DataSection, "env": EnvSection, "predictor": PredictorSection,
            "ppo": PpoSection, "sweep": SweepSection, "di": DiSection}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "out"
    world: WorldConfig = field(default_factory=lambda: WorldConfig.from_dict(DESK_WORLD))
    data: DataSection = field(default_factory=DataSection)
    env: EnvSection = field(default_factory=EnvSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    di: DiSection = field(default_factory=DiSection)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        raw = dict(raw or {})
        unknown = set(raw) - {"seed", "out", "world", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown top-level config keys {sorted(unknown)}")
        world = dict(DESK_WORLD)
        world.update(raw.get("world") or {})
        world = _coerce(WorldConfig, world, "world") if set(world) <= set(DESK_WORLD) else world
        try:
            seed = int(raw.get("seed", 0))
        except (TypeError, ValueError) as exc:
            raise ConfigError("seed must be an integer") from exc
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        return cls(seed=seed, out=str(raw.get("out", "out")), world=WorldConfig.from_dict(world),
                   **{name: _section(sec, raw.get(name), name) for name, sec in SECTIONS.items()})

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       trials: int | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            if seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg = replace(cfg, seed=int(seed))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if trials is not None:
            if trials < 1:
                raise ConfigError("trials must be at least 1")
            cfg = replace(cfg, sweep=replace(cfg.sweep, trials=int(trials)))
        return cfg


def apply_env_overrides(raw: dict, environ: Mapping[str, str] | None = None) -> dict:
    """Fold ``SKYWATCH_*`` variables into a raw config mapping."""
    environ = os.environ if environ is None else environ
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (raw or {}).items()}
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = yaml.safe_load(environ[key])
            if isinstance(value, str):
                try:
                    value = float(value)
                except ValueError:
                    pass
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: cannot parse value: {exc}") from exc
        if len(path) == 1:
            raw[path[0]] = value
        elif len(path) == 2:
            section = raw.setdefault(path[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"{key}: [{path[0]}] is not a section")
            section[path[1]] = value
        else:
            raise ConfigError(f"{key}: overrides are SECTION__KEY at most")
    return raw


def load_config(path=None, environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read YAML (or start from the defaults), apply env overrides, validate."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    return ExperimentConfig.from_dict(apply_env_overrides(raw, environ))


def dump_config(cfg: ExperimentConfig) -> str:
    d = asdict(cfg)
    d["world"]["station_xy"] = list(d["world"]["station_xy"])
    return yaml.safe_dump(d, sort_keys=True)

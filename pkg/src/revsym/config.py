"""Run configuration: TOML file sections, overridable by ``--section-key`` flags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .dynamics import IntegratorConfig, make_system
from .reversible import parse_kind
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SystemSection:
    name: str = "henon-heiles"
    lam: float | None = None   # TOML key "lambda"; system default when absent
    energy: float = 1.0 / 8.0
    nu: float = 0.5
    step: float = 1e-3
    refine_tol: float = 1e-10
    max_time: float = 100.0
    region: list | None = None
    n: int | None = None
    seed: int = 0

    def build(self):
        kw: dict[str, Any] = {}
        if self.lam is not None:
            kw["lam"] = self.lam
        if self.name in ("henon-heiles", "hh"):
            kw["energy"] = self.energy
        else:
            kw["nu"] = self.nu
        if self.region is not None:
            kw["region"] = tuple(tuple(float(v) for v in r) for r in self.region)
        return make_system(self.name, **kw)

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.step, self.refine_tol, self.max_time)

    def default_n(self) -> int:
        if self.n is not None:
            return self.n
        return 300 if self.name in ("henon-heiles", "hh") else 100


@dataclass
class ModelSection:
    kind: str = "hr"
    depth: int | None = None
    degree: int = 4
    hidden: list = field(default_factory=lambda: [16])
    width: int = 34
    sublayers: int = 8
    seed: int = 0
    scale: Any = "auto"
    henon_init: float = 0.05


@dataclass
class TrainingSection:
    epochs: int = 20000
    batch_size: int = 0
    lr0: float = 1e-3
    decay_rate: float = 0.9995
    split_ratio: float = 0.9
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    keep_best: bool = False
    record_time: bool = False

    def train_config(self) -> TrainConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**kw)


@dataclass
class EvaluationSection:
    cloud_seeds: int = 20
    cloud_iterations: int = 500
    error_orbits: int = 5
    error_iterations: int = 20
    box_inflation: float = 0.2
    box: list | None = None


@dataclass
class PathsSection:
    out_dir: str = "runs"


SECTIONS = {"system": SystemSection, "model": ModelSection, "training": TrainingSection,
            "evaluation": EvaluationSection, "paths": PathsSection}

# TOML spelling -> field name
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_KEYS = {v: k for k, v in _KEY_ALIASES.items()}


@dataclass
class RunConfig:
    system: SystemSection = field(default_factory=SystemSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        try:
            self.system.build()
            self.system.integrator()
            self.training.train_config()
            parse_kind(self.model.kind)
        except (ValueError, TypeError) as err:
            raise ConfigError(str(err)) from None
        if not (self.model.scale == "auto" or isinstance(self.model.scale, (int, float))):
            raise ConfigError("model.scale must be 'auto' or a number")
        out = Path(self.paths.out_dir)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"paths.out_dir {out} exists and is not a directory")
        return self

    def set(self, section: str, key: str, value) -> None:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        name = _KEY_ALIASES.get(key, key).replace("-", "_")
        if name not in {f.name for f in dataclasses.fields(sec)}:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(sec, name, value)

    def to_dict(self) -> dict:
        out = {}
        for s in SECTIONS:
            d = dataclasses.asdict(getattr(self, s))
            out[s] = {_FIELD_KEYS.get(k, k): v for k, v in d.items()}
        return out


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        data = tomli.loads(Path(path).read_text())
    except (OSError, tomli.TOMLDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    for section, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key {section!r} must be a table")
        for k, v in values.items():
            cfg.set(section, k, v)
    return cfg


def field_types(section: str) -> dict:
    """Field name -> (TOML key, python type or None for free-form) for flag generation."""
    types = {}
    for f in dataclasses.fields(SECTIONS[section]):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        t = {bool: "bool", int: int, float: float, str: str}.get(type(default))
        if f.name in ("lam",):
            t = float
        if f.name == "n":
            t = int
        types[f.name] = (_FIELD_KEYS.get(f.name, f.name), t)
    return types

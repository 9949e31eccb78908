"""Run configuration: one nested mapping with the sections below, loaded from
TOML or JSON. Every key has a default; unknown keys are rejected.

Precedence (lowest first): built-in defaults, the ``simulator.preset`` named
preset, the config file, ``--set section.key=value`` overrides, then the
dedicated command-line flags (``--seed``, ``--rho``, ...).
"""
from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .models import ModelConfig
from .objectives import GLOBAL_WEIGHT_GRID, KL_GRID, LossWeights
from .simulator import PRESETS, SimulatorConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SECTIONS = ("simulator", "schema", "model", "weights", "training", "evaluation", "paths")
NAMED_GRIDS = {"kl": {"kl": list(KL_GRID)}, "global": {"ctcar_global": list(GLOBAL_WEIGHT_GRID)}}


@dataclass
class EvaluationConfig:
    strict_auc: bool = False
    split_session: int | None = None  # first test session; None = last fifth of the visits
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1
    grid: dict = field(default_factory=lambda: dict(NAMED_GRIDS["kl"]))


@dataclass
class SchemaConfig:
    embed_dim: int = 8


@dataclass
class PathsConfig:
    out: str = "runs/default"
    data: str | None = None
    checkpoint: str | None = None


@dataclass
class RunConfig:
    simulator: SimulatorConfig
    schema: SchemaConfig
    train: TrainConfig
    evaluation: EvaluationConfig
    paths: PathsConfig
    preset: str = "default"

    def to_dict(self):
        t = self.train.to_dict()
        model, weights = t.pop("model"), t.pop("weights")
        return {
            "simulator": {"preset": self.preset, **self.simulator.to_dict()},
            "schema": vars(self.schema).copy(),
            "model": model,
            "weights": weights,
            "training": t,
            "evaluation": vars(self.evaluation).copy(),
            "paths": vars(self.paths).copy(),
        }

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _names(cls):
    return {f.name for f in fields(cls)}


def load_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None


def parse_set(items):
    """``section.key=value`` strings to a nested mapping; values parse as JSON
    when they can (numbers, booleans, lists), else stay strings."""
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def merge(base, over):
    out = {k: dict(v) for k, v in base.items()}
    for section, values in over.items():
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        out.setdefault(section, {}).update(values)
    return out


def resolve(raw: dict) -> RunConfig:
    _check_keys("top level", raw, SECTIONS)
    raw = {s: dict(raw.get(s, {})) for s in SECTIONS}

    sim = raw["simulator"]
    name = sim.pop("preset", "default")
    if name not in PRESETS:
        raise ConfigError(f"unknown simulator preset {name!r}; choose from {sorted(PRESETS)}")
    _check_keys("simulator", sim, _names(SimulatorConfig))
    simulator = replace(PRESETS[name], **sim)

    _check_keys("schema", raw["schema"], _names(SchemaConfig))
    _check_keys("model", raw["model"], _names(ModelConfig))
    _check_keys("weights", raw["weights"], _names(LossWeights))
    train_keys = _names(TrainConfig) - {"model", "weights"}
    _check_keys("training", raw["training"], train_keys)
    _check_keys("evaluation", raw["evaluation"], _names(EvaluationConfig))
    _check_keys("paths", raw["paths"], _names(PathsConfig))
    try:
        train = TrainConfig(model=ModelConfig(**raw["model"]), weights=LossWeights(**raw["weights"]),
                            **raw["training"])
        ev = EvaluationConfig(**raw["evaluation"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if isinstance(ev.grid, str):
        if ev.grid not in NAMED_GRIDS:
            raise ConfigError(f"unknown named grid {ev.grid!r}; choose from {sorted(NAMED_GRIDS)}")
        ev.grid = dict(NAMED_GRIDS[ev.grid])
    if not isinstance(ev.grid, dict) or not ev.grid:
        raise ConfigError("evaluation.grid must be a nonempty table of parameter -> values")
    return RunConfig(simulator, SchemaConfig(**raw["schema"]), train, ev,
                     PathsConfig(**raw["paths"]), name)


def load(path=None, overrides=None) -> RunConfig:
    raw = load_file(path) if path else {}
    return resolve(merge(raw, overrides or {}))

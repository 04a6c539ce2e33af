"""Run configuration: one JSON document with a section per subsystem.

Every field of every section is also reachable as a ``--section.field`` flag.
Unknown sections or fields are rejected with a message naming them.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .meta import MetaConfig
from .model import ModelConfig
from .qgr import FinetuneConfig
from .synth import BenchmarkConfig

SEED_ENV = "GRMP_SEED"


class ConfigError(ValueError):
    """Bad configuration input (unknown field, wrong type, invalid value)."""


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    batch_size: int = 256

    def __post_init__(self):
        if self.split not in ("test", "all"):
            raise ValueError(f"eval split must be 'test' or 'all', got {self.split!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


SECTIONS = {
    "data": BenchmarkConfig,
    "model": ModelConfig,
    "meta": MetaConfig,
    "finetune": FinetuneConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    data: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        out = {name: _section_dict(getattr(self, name)) for name in SECTIONS}
        out["seed"] = self.seed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _section_dict(obj) -> dict:
    return {f.name: (list(v) if isinstance(v := getattr(obj, f.name), tuple) else v)
            for f in dataclasses.fields(obj)}


def field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def coerce(value, tp, where: str):
    """Convert JSON or command-line text ``value`` to the field type ``tp``."""
    origin = typing.get_origin(tp)
    if origin is tuple:
        (inner, *_) = typing.get_args(tp)
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(coerce(v, inner, where) for v in value)
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "1", "yes", "false", "0", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build_section(name: str, values: dict):
    cls = SECTIONS[name]
    types = field_types(cls)
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown field '{name}.{key}'")
        kwargs[key] = coerce(raw, types[key], f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def from_dict(doc: dict, overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed document plus dotted overrides.

    ``overrides`` maps ``"section.field"`` (or ``"seed"``) to raw values and
    wins over ``doc``.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    merged: dict[str, dict] = {name: {} for name in SECTIONS}
    seed = doc.get("seed", 0)
    for key, value in doc.items():
        if key == "seed":
            continue
        if key not in SECTIONS:
            raise ConfigError(f"unknown section '{key}'")
        if not isinstance(value, dict):
            raise ConfigError(f"section '{key}' must be an object")
        merged[key].update(value)
    for dotted, value in (overrides or {}).items():
        if dotted == "seed":
            seed = value
            continue
        section, _, key = dotted.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section '{section}'")
        merged[section][key] = value
    sections = {name: _build_section(name, values) for name, values in merged.items()}
    return RunConfig(**sections, seed=coerce(seed, int, "seed"))


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Read ``path`` (optional), then apply ``GRMP_SEED`` and ``overrides``."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    overrides = dict(overrides or {})
    env = os.environ if env is None else env
    if SEED_ENV in env and "seed" not in overrides:
        overrides["seed"] = env[SEED_ENV]
    return from_dict(doc, overrides)

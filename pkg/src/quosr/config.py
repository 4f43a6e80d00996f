"""Experiment configuration: one JSON document with a section per component."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .expr import GeneratorConfig
from .querynet import ModelConfig, QueryConfig
from .training import TrainConfig

CONFIG_VERSION = 1
SEED_ENV = "QUOSR_SEED"


@dataclass
class EvalConfig:
    eval_seed: int | None = 0
    query_seed: int = 0
    methods: tuple = ("quosr", "uniform", "normal")
    budget: int = 0
    curve: bool = True
    n_starts: int = 8

    def validate(self) -> list[str]:
        errs = []
        for m in self.methods:
            if m not in ("quosr", "uniform", "normal"):
                errs.append(f"eval.methods: unknown method {m!r}")
        if self.budget < 0:
            errs.append("eval.budget must be >= 0")
        if self.n_starts < 1:
            errs.append("eval.n_starts must be >= 1")
        return errs


@dataclass
class GenConfig:
    count: int = 64
    seed: int = 0
    arity: int = 1
    max_depth: int = 4

    def validate(self) -> list[str]:
        errs = []
        if self.count < 0:
            errs.append("gen.count must be >= 0")
        if self.max_depth < 1:
            errs.append("gen.max_depth must be >= 1")
        if self.arity < 1:
            errs.append("gen.arity must be >= 1")
        return errs

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(max_depth=self.max_depth, arity=self.arity)


@dataclass
class PathConfig:
    family: str = ""
    out_dir: str = "run"

    def validate(self) -> list[str]:
        return []


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "query": QueryConfig,
    "eval": EvalConfig,
    "gen": GenConfig,
    "paths": PathConfig,
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    # dotted keys given explicitly in the file or overrides
    explicit: set = field(default_factory=set, repr=False, compare=False)

    def validate(self) -> list[str]:
        errs = []
        for name in SECTIONS:
            for e in getattr(self, name).validate():
                errs.append(e if e.startswith(name + ".") else f"{name}: {e}")
        if self.model.m != self.train.m:
            errs.append(f"model.m ({self.model.m}) must equal train.m ({self.train.m})")
        if tuple(self.model.box) != tuple(self.query.box):
            errs.append("model.box and query.box differ")
        return errs

    def to_dict(self) -> dict:
        out = {"version": CONFIG_VERSION}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def _coerce(section: str, cls, values: dict, errs: list) -> object:
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            errs.append(f"unknown key {section}.{key}")
            continue
        if val is None and "None" in str(known[key].type):
            kwargs[key] = None
            continue
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(val, (list, tuple)):
                errs.append(f"{section}.{key} must be a list")
                continue
            val = tuple(val)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                errs.append(f"{section}.{key} must be true or false")
                continue
        elif isinstance(default, int) and not isinstance(val, bool):
            if isinstance(val, float) and val.is_integer():
                val = int(val)
            if not isinstance(val, int):
                errs.append(f"{section}.{key} must be an integer")
                continue
        elif isinstance(default, float):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                errs.append(f"{section}.{key} must be a number")
                continue
            val = float(val)
        elif isinstance(default, str) and not isinstance(val, str):
            errs.append(f"{section}.{key} must be a string")
            continue
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errs.append(f"{section}: {exc}")
        return cls()


def from_dict(data: dict) -> ExperimentConfig:
    """Build and validate a config; every problem is reported at once."""
    errs: list[str] = []
    data = dict(data)
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        errs.append(f"unsupported config version {version!r}")
    parts = {}
    for key, val in data.items():
        if key not in SECTIONS:
            errs.append(f"unknown section {key!r}")
        elif not isinstance(val, dict):
            errs.append(f"section {key!r} must be an object")
        else:
            parts[key] = _coerce(key, SECTIONS[key], val, errs)
    cfg = ExperimentConfig(**parts)
    cfg.explicit = {f"{sec}.{k}" for sec, v in data.items() if isinstance(v, dict) for k in v}
    errs += [e for e in cfg.validate() if e not in errs]
    if errs:
        raise ConfigError(errs)
    return cfg


def parse_override(text: str) -> tuple[str, str, object]:
    """``section.key=value``; the value is read as JSON, falling back to a string."""
    lhs, sep, rhs = text.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError([f"override {text!r} is not of the form section.key=value"])
    try:
        val = json.loads(rhs)
    except json.JSONDecodeError:
        val = rhs
    return section, key, val


def load(path=None, overrides=()) -> ExperimentConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be an object"])
    for text in overrides:
        section, key, val = parse_override(text)
        data.setdefault(section, {})
        if not isinstance(data[section], dict):
            raise ConfigError([f"section {section!r} must be an object"])
        data[section][key] = val
    cfg = from_dict(data)
    apply_seed_fallback(cfg)
    return cfg


SEED_KEYS = ("train.seed", "gen.seed", "eval.eval_seed", "eval.query_seed")


def apply_seed_fallback(cfg: ExperimentConfig) -> None:
    """Seeds not set explicitly take ``$QUOSR_SEED`` when it is defined."""
    env = os.environ.get(SEED_ENV)
    if env in (None, ""):
        return
    seed = resolve_seed(None)
    for key in SEED_KEYS:
        if key not in cfg.explicit:
            section, name = key.split(".")
            setattr(getattr(cfg, section), name, seed)


def resolve_seed(explicit: int | None, default: int = 0) -> int:
    """Explicit seed, else ``$QUOSR_SEED``, else ``default``."""
    if explicit is not None:
        return explicit
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError([f"{SEED_ENV}={env!r} is not an integer"]) from None
    return default

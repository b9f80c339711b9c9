"""Run configuration: JSON files plus dotted-key overrides, mapped onto the dataclass configs."""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import PhantomSpec
from .pipeline import TrainConfig, desk_train_config

RUN_DIR_ENV = "ORTHOCT_RUN_DIR"


class ConfigKeyError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train_fraction: float = 0.8
    stage1: TrainConfig = field(default_factory=lambda: desk_train_config(1))
    stage2: TrainConfig = field(default_factory=lambda: desk_train_config(2))


def default_run_dir() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def _convert(tp, value):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v) for v in value)
        if args and len(args) == len(value):
            return tuple(_convert(a, v) for a, v in zip(args, value))
        return tuple(value)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value) if len(args) == 1 else value
    if tp is float and isinstance(value, int):
        return float(value)
    return value


def from_dict(cls, data: dict):
    """Build dataclass ``cls`` from a plain dict, rejecting unknown keys at every level."""
    if not isinstance(data, dict):
        raise ConfigKeyError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigKeyError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    return cls(**{k: _convert(hints[k], v) for k, v in data.items()})


def merge(base: dict, update: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigKeyError(f"unknown config key {where}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ValueError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(d: dict, key: str, value) -> dict:
    parts = key.split(".")
    update: dict = {}
    cur = update
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return merge(d, update)


def load_run_config(path=None, overrides=()) -> RunConfig:
    d = to_dict(RunConfig())
    if path is not None:
        d = merge(d, json.loads(Path(path).read_text()))
    for item in overrides:
        d = apply_override(d, *parse_override(item))
    return from_dict(RunConfig, d)


def write_effective(cfg: RunConfig, path, extra: dict | None = None) -> None:
    doc = {"config": to_dict(cfg)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


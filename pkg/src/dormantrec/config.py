"""Run configuration: nested dataclasses built from YAML plus dotted overrides."""
from __future__ import annotations

import collections.abc
import dataclasses
import enum
import os
import types
import typing
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .cotrain import LoopConfig
from .pipeline import ExperimentConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    """Artifact locations; relative entries resolve against the output directory."""

    catalog: str = "world/catalog.jsonl"
    interactions: str = "world/interactions.jsonl"
    profiles: str = "world/profiles.jsonl"
    truth: str = "world/truth.jsonl"
    world_config: str = "world/config.json"
    planted_graph: str = "world/graph_planted.jsonl"
    mined_graph: str = "graph/graph_mined.jsonl"
    graph: str = ""                      # empty picks the planted or mined file by graph_source
    codebook: str = "codebook/codebook.npz"
    sids: str = "codebook/sids.jsonl"
    roles: str = "roles/roles.jsonl"
    oracle: str = "roles/oracle.jsonl"
    global_roles: str = "roles/global_roles.jsonl"
    reasoner: str = "reasoner/outputs.jsonl"
    queries: str = "reasoner/queries.jsonl"
    checkpoints: str = "checkpoints"
    datasets: str = "datasets"
    inference: str = "inference"
    reports: str = "reports"

    def resolve(self, out_dir: str) -> "Paths":
        return Paths(**{
            f.name: (v if not v or os.path.isabs(v) else os.path.join(out_dir, v))
            for f in dataclasses.fields(self)
            for v in [getattr(self, f.name)]
        })


@dataclass
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)

    def seeded(self) -> "RunConfig":
        """Copy with the global seed pushed into every module config."""
        return dataclasses.replace(
            self,
            experiment=self.experiment.with_seed(self.seed),
            loop=dataclasses.replace(self.loop, seed=self.seed),
        )

    def graph_path(self) -> str:
        if self.paths.graph:
            return self.paths.graph
        return self.paths.planted_graph if self.experiment.graph_source == "planted" else self.paths.mined_graph


def _coerce(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return build(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{where}: bad value {value!r}")
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        if isinstance(value, tp):
            return value
        for m in tp:
            if value in (m.value, m.name):
                return m
        raise ConfigError(f"{where}: {value!r} is not one of {[m.value for m in tp]}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin in (list, collections.abc.Sequence):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        inner = args[0] if args else Any
        return [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin in (dict, collections.abc.Mapping):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{where}: expected a mapping")
        kt, vt = args or (Any, Any)
        return {_coerce(kt, k, where): _coerce(vt, v, f"{where}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def _field_default(f: dataclasses.Field) -> Any:
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None if f.default is dataclasses.MISSING else f.default


def build(cls: type, data: Mapping | None, where: str = "", base: Any = None) -> Any:
    """Instantiate a dataclass from a (possibly partial) mapping.

    Absent keys keep the value they have in ``base`` (or the field default), so a
    partial nested section only overrides what it names.
    """
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or cls.__name__}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key {'.'.join(filter(None, [where, unknown[0]]))}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        path = ".".join(filter(None, [where, k]))
        current = getattr(base, k) if base is not None else _field_default(fields[k])
        if dataclasses.is_dataclass(current) and isinstance(v, Mapping):
            kwargs[k] = build(type(current), v, path, base=current)
        else:
            kwargs[k] = _coerce(hints[k], v, path)
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def to_dict(obj: Any) -> Any:
    """Plain YAML/JSON-ready form of a config object."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, Mapping):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def apply_override(data: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` inside a nested dict; the value is read as YAML."""
    key, sep, text = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {assignment!r} is not key=value")
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(text)


def load_config(path: str | None = None, overrides: typing.Iterable[str] = (), seed: int | None = None) -> RunConfig:
    data: dict = {}
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(2, "missing config file", path)
        with open(path) as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from exc
    for item in overrides:
        apply_override(data, item)
    if seed is not None:
        data["seed"] = seed
    return build(RunConfig, data).seeded()

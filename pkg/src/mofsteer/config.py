"""Run configuration: a versioned YAML tree mapped onto the model dataclasses.

Every key is checked; an unknown or ill-typed key raises :class:`ConfigError`
carrying its dotted path, e.g. ``engine.batch_sise``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from .domain import StageKind, WorkerClass
from .engine import EngineSettings, Partition, PartitionPlan, SteeringEngine
from .simcluster import DataFabricModel
from .stages import QualityModel, StageModel, default_stage_models

SCHEMA_VERSION = 1
BACKENDS = ("sim", "local")
# engine switches exposed at the top level rather than under ``engine``
_TOP_LEVEL_FLAGS = ("retraining_enabled", "reallocation_enabled")
DEFAULT_CALIBRATION = "default"
_SECTIONS = ("partition", "engine", "fabric", "quality", "stages", "local")
_TOP_LEVEL_SCALARS = ("nodes", "horizon", "seed", "backend", "synthesize_cells") + _TOP_LEVEL_FLAGS


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _coerce(value: Any, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(key, f"expected a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    raise ConfigError(key, f"unsupported setting type {tp!r}")  # pragma: no cover


def _section(value: Any, key: str) -> Mapping[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
    return value


def _build(cls, base, data: Mapping[str, Any], prefix: str, skip: tuple[str, ...] = ()):
    """``base`` with the scalar fields named in ``data`` replaced."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    changes = {}
    for k, v in data.items():
        key = _join(prefix, str(k))
        if k not in names:
            raise ConfigError(key, f"unknown key (expected one of {sorted(names)})")
        changes[k] = _coerce(v, hints[k], key)
    try:
        return dataclasses.replace(base, **changes)
    except ValueError as exc:
        raise ConfigError(prefix, str(exc)) from None


def _scalars(obj, skip: tuple[str, ...] = ()) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


@dataclass(frozen=True)
class LocalSettings:
    time_scale: float = 1e-3
    oversubscription_cap: int = 128
    worker_caps: Mapping[WorkerClass, int] = field(default_factory=dict)


def _stage_models(data: Mapping[str, Any], prefix: str) -> dict[StageKind, StageModel]:
    models = default_stage_models()
    for name, body in data.items():
        key = _join(prefix, str(name))
        try:
            stage = StageKind(name)
        except ValueError:
            raise ConfigError(key, f"unknown stage (expected one of {[s.value for s in StageKind]})") from None
        body = dict(_section(body, key))
        model = models[stage]
        for step_name, step_body in _section(body.pop("steps", None), _join(key, "steps")).items():
            step_key = _join(_join(key, "steps"), str(step_name))
            try:
                step = model.step(step_name)
            except KeyError:
                raise ConfigError(step_key, f"unknown step (expected one of {[s.name for s in model.steps]})") from None
            new = _build(type(step), step, _section(step_body, step_key), step_key, skip=("name", "per_item"))
            model = dataclasses.replace(model, steps=tuple(new if s.name == step_name else s for s in model.steps))
        models[stage] = _build(StageModel, model, body, key, skip=("stage", "steps", "resource"))
    return models


def _local(data: Mapping[str, Any], prefix: str) -> LocalSettings:
    data = dict(data)
    caps = {}
    for name, n in _section(data.pop("worker_caps", None), _join(prefix, "worker_caps")).items():
        key = _join(_join(prefix, "worker_caps"), str(name))
        try:
            cls = WorkerClass(name)
        except ValueError:
            raise ConfigError(key, f"unknown worker class (expected one of {[c.value for c in WorkerClass]})") from None
        n = _coerce(n, int, key)
        if n < 1:
            raise ConfigError(key, "must be at least 1")
        caps[cls] = n
    settings = _build(LocalSettings, LocalSettings(), data, prefix, skip=("worker_caps",))
    if not settings.time_scale > 0:
        raise ConfigError(_join(prefix, "time_scale"), "must be positive")
    if settings.oversubscription_cap < 1:
        raise ConfigError(_join(prefix, "oversubscription_cap"), "must be at least 1")
    return dataclasses.replace(settings, worker_caps=caps)


def packaged_calibration() -> Optional[Path]:
    path = resources.files("mofsteer") / "data" / "calibration.yaml"
    return Path(str(path)) if path.is_file() else None


def load_calibration(path: Union[str, Path]) -> dict[str, Any]:
    """Quality-model values from a calibration file (its ``quality`` section)."""
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    quality = _section(doc.get("quality"), "calibration.quality")
    _build(QualityModel, QualityModel(), quality, "calibration.quality")
    return dict(quality)


@dataclass(frozen=True)
class RunConfig:
    nodes: int = 32
    horizon: float = 5400.0
    seed: int = 0
    backend: str = "sim"
    retraining_enabled: bool = True
    reallocation_enabled: bool = False
    synthesize_cells: bool = True
    partition: PartitionPlan = PartitionPlan()
    engine: EngineSettings = EngineSettings()
    fabric: DataFabricModel = DataFabricModel()
    quality: QualityModel = QualityModel()
    stage_models: Mapping[StageKind, StageModel] = field(default_factory=default_stage_models)
    local: LocalSettings = LocalSettings()
    # where the quality values came from, for the snapshot only
    calibration: Optional[str] = None

    def __post_init__(self):
        if self.nodes < 1:
            raise ConfigError("nodes", "must be at least 1")
        if not self.horizon >= 0:
            raise ConfigError("horizon", "must be non-negative")
        if self.backend not in BACKENDS:
            raise ConfigError("backend", f"expected one of {list(BACKENDS)}, got {self.backend!r}")
        if self.retraining_enabled and self.partition.trainer_nodes < 1:
            raise ConfigError("partition.trainer_nodes", "retraining needs at least one trainer node")

    # construction

    @classmethod
    def default(cls, **changes) -> "RunConfig":
        """Defaults with the packaged calibration applied."""
        return cls.from_mapping({"schema_version": SCHEMA_VERSION}).replace(**changes)

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any], base_dir: Optional[Path] = None) -> "RunConfig":
        doc = dict(_section(doc, ""))
        version = doc.pop("schema_version", None)
        if version is None:
            raise ConfigError("schema_version", "missing")
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {version!r} (this build reads {SCHEMA_VERSION})")

        sections = {k: doc.pop(k) for k in _SECTIONS if k in doc}
        calibration = doc.pop("calibration", DEFAULT_CALIBRATION)
        scalars = {}
        hints = typing.get_type_hints(cls)
        for k, v in doc.items():
            if k not in _TOP_LEVEL_SCALARS:
                known = sorted(_TOP_LEVEL_SCALARS + _SECTIONS + ("schema_version", "calibration"))
                raise ConfigError(str(k), f"unknown key (expected one of {known})")
            scalars[k] = _coerce(v, hints[k], k)

        quality_values: dict[str, Any] = {}
        source = None
        if calibration == DEFAULT_CALIBRATION:
            path = packaged_calibration()
            if path is not None:
                quality_values.update(load_calibration(path))
                source = DEFAULT_CALIBRATION
        elif calibration is not None:
            if not isinstance(calibration, str):
                raise ConfigError("calibration", f"expected a path, 'default' or null, got {calibration!r}")
            path = Path(calibration)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.is_file():
                raise ConfigError("calibration", f"file not found: {path}")
            quality_values.update(load_calibration(path))
            source = str(path)
        quality_values.update(_section(sections.get("quality"), "quality"))

        return cls(
            **scalars,
            partition=_build(PartitionPlan, PartitionPlan(), _section(sections.get("partition"), "partition"), "partition"),
            engine=_build(EngineSettings, EngineSettings(), _section(sections.get("engine"), "engine"), "engine",
                          skip=_TOP_LEVEL_FLAGS),
            fabric=_build(DataFabricModel, DataFabricModel(), _section(sections.get("fabric"), "fabric"), "fabric"),
            quality=_build(QualityModel, QualityModel(), quality_values, "quality"),
            stage_models=_stage_models(_section(sections.get("stages"), "stages"), "stages"),
            local=_local(_section(sections.get("local"), "local"), "local"),
            calibration=source,
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("", f"{path} is not valid YAML: {exc}") from None
        if doc is None:
            doc = {}
        return cls.from_mapping(doc, base_dir=path.parent)

    def replace(self, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes) if changes else self

    # use

    def layout(self) -> Partition:
        try:
            return self.partition.layout(self.nodes)
        except ValueError as exc:
            raise ConfigError("nodes", str(exc)) from None

    def engine_settings(self) -> EngineSettings:
        return dataclasses.replace(
            self.engine,
            retraining_enabled=self.retraining_enabled,
            reallocation_enabled=self.reallocation_enabled,
        )

    def build_engine(self) -> SteeringEngine:
        return SteeringEngine(
            self.layout(), self.engine_settings(), self.quality, self.fabric.payload_processing_latency,
        )

    def to_mapping(self) -> dict[str, Any]:
        """Self-contained tree that loads back to an equal config."""
        stages = {}
        defaults = default_stage_models()
        for stage, model in self.stage_models.items():
            if model == defaults[stage]:
                continue
            body = _scalars(model, skip=("stage", "steps", "resource"))
            body["steps"] = {s.name: {"mean_duration": s.mean_duration, "pass_probability": s.pass_probability}
                             for s in model.steps}
            stages[stage.value] = body
        local = _scalars(self.local, skip=("worker_caps",))
        local["worker_caps"] = {c.value: n for c, n in self.local.worker_caps.items()}
        return {
            "schema_version": SCHEMA_VERSION,
            "nodes": self.nodes,
            "horizon": self.horizon,
            "seed": self.seed,
            "backend": self.backend,
            "retraining_enabled": self.retraining_enabled,
            "reallocation_enabled": self.reallocation_enabled,
            "synthesize_cells": self.synthesize_cells,
            # quality values are written out in full, so no calibration file is needed
            "calibration": None,
            "partition": _scalars(self.partition),
            "engine": _scalars(self.engine, skip=_TOP_LEVEL_FLAGS),
            "fabric": _scalars(self.fabric),
            "quality": _scalars(self.quality),
            "stages": stages,
            "local": local,
        }

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            if self.calibration:
                fh.write(f"# quality values taken from calibration: {self.calibration}\n")
            yaml.safe_dump(self.to_mapping(), fh, sort_keys=False)
        return path

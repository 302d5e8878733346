"""Shared record types for the screening campaign.

Everything here is immutable once built. Records move forward through the
pipeline by producing a new value (see :meth:`MofRecord.advance`) rather
than by mutation, so they can be handed between the engine and any backend
without copying.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class AnchorType(str, enum.Enum):
    BCA = "BCA"  # benzenecarboxylic acid
    BZN = "BZN"  # benzonitrile


class StageKind(str, enum.Enum):
    GenerateLinkers = "GenerateLinkers"
    ProcessLinkers = "ProcessLinkers"
    AssembleMofs = "AssembleMofs"
    ValidateStructure = "ValidateStructure"
    OptimizeCells = "OptimizeCells"
    EstimateAdsorption = "EstimateAdsorption"
    Retrain = "Retrain"


_STAGE_ORDER = {stage: i + 1 for i, stage in enumerate(StageKind)}


def stage_order(stage: StageKind) -> int:
    """Position (1..7) of ``stage`` in the campaign pipeline."""
    return _STAGE_ORDER[StageKind(stage)]


class MofStage(str, enum.Enum):
    Assembled = "Assembled"
    AssemblyChecked = "AssemblyChecked"
    PreSimChecked = "PreSimChecked"
    StabilityKnown = "StabilityKnown"
    CellOptimized = "CellOptimized"
    ChargesKnown = "ChargesKnown"
    CapacityKnown = "CapacityKnown"
    Discarded = "Discarded"


_MOF_RANK = {stage: i for i, stage in enumerate(MofStage) if stage is not MofStage.Discarded}


class Outcome(str, enum.Enum):
    Success = "Success"
    ScreenedOut = "Screened-Out"
    Failed = "Failed"


class WorkerClass(str, enum.Enum):
    GeneratorWorker = "GeneratorWorker"
    ValidatorWorker = "ValidatorWorker"
    ScavengerWorker = "ScavengerWorker"
    TrainerWorker = "TrainerWorker"
    OptimizerWorker = "OptimizerWorker"


class InvalidTransition(ValueError):
    pass


_ADVANCE_FIELDS = frozenset({"linker_quality", "cell_initial", "cell_final", "strain", "capacity"})


@dataclass(frozen=True, slots=True)
class LinkerRecord:
    id: int
    anchor_type: AnchorType
    created_at: float
    latent_quality: float
    model_version: int

    def __post_init__(self):
        if not 0.0 <= self.latent_quality <= 1.0:
            raise ValueError(f"latent_quality {self.latent_quality} outside [0, 1]")


@dataclass(frozen=True, slots=True)
class MofRecord:
    id: int
    linker_ids: tuple[int, ...]
    stage: MofStage
    timestamps: tuple[tuple[MofStage, float], ...]
    linker_quality: float = 0.0
    cell_initial: Optional[np.ndarray] = field(default=None, compare=False)
    cell_final: Optional[np.ndarray] = field(default=None, compare=False)
    strain: Optional[float] = None
    capacity: Optional[float] = None

    @classmethod
    def assembled(cls, id: int, linker_ids, time: float, linker_quality: float = 0.0) -> "MofRecord":
        return cls(
            id=id,
            linker_ids=tuple(linker_ids),
            stage=MofStage.Assembled,
            timestamps=((MofStage.Assembled, time),),
            linker_quality=linker_quality,
        )

    @property
    def discarded(self) -> bool:
        return self.stage is MofStage.Discarded

    def stage_time(self, stage: MofStage) -> Optional[float]:
        for s, t in self.timestamps:
            if s is stage:
                return t
        return None

    def advance(self, stage: MofStage, time: float, **fields) -> "MofRecord":
        """Return a copy moved to ``stage`` with extra fields filled in.

        Fields that are already set cannot be overwritten.
        """
        if self.discarded:
            raise InvalidTransition(f"MOF {self.id} is discarded")
        if stage is not MofStage.Discarded and _MOF_RANK[stage] <= _MOF_RANK[self.stage]:
            raise InvalidTransition(f"MOF {self.id}: {self.stage.value} -> {stage.value}")
        if self.timestamps and time < self.timestamps[-1][1]:
            raise InvalidTransition(f"MOF {self.id}: time went backwards")
        for name in fields:
            if name not in _ADVANCE_FIELDS:
                raise TypeError(f"unknown MOF field {name!r}")
            if getattr(self, name) is not None and name != "linker_quality":
                raise InvalidTransition(f"MOF {self.id}: {name} already recorded")
        if "strain" in fields and stage is not MofStage.StabilityKnown:
            raise InvalidTransition("strain is recorded with StabilityKnown")
        get = fields.get
        return MofRecord(
            self.id,
            self.linker_ids,
            stage,
            self.timestamps + ((stage, time),),
            get("linker_quality", self.linker_quality),
            get("cell_initial", self.cell_initial),
            get("cell_final", self.cell_final),
            get("strain", self.strain),
            get("capacity", self.capacity),
        )


@dataclass(frozen=True, slots=True)
class GeneratorState:
    version: int = 0
    quality: float = 0.0
    examples_seen: int = 0
    last_retrain_at: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"generator quality {self.quality} outside [0, 1]")


@dataclass(frozen=True, slots=True)
class ResourceSpec:
    cpu_cores: int = 0
    gpu_fraction: float = 0.0
    whole_nodes: int = 0

    def __post_init__(self):
        if self.cpu_cores < 0 or self.whole_nodes < 0:
            raise ValueError("resource counts must be non-negative")
        if self.gpu_fraction not in (0.0, 0.5, 1.0):
            raise ValueError(f"gpu_fraction must be 0, 0.5 or 1.0, got {self.gpu_fraction}")
        fractional = self.cpu_cores + self.gpu_fraction > 0
        if (self.whole_nodes > 0) == fractional:
            raise ValueError("set either whole_nodes or cpu_cores/gpu_fraction, not both")


@dataclass(frozen=True, slots=True)
class NodeSpec:
    cpu_cores: int = 32
    gpus: int = 4
    gpu_memory_gb: int = 40


@dataclass(frozen=True, slots=True)
class TaskRequest:
    id: int
    stage: StageKind
    worker: WorkerClass
    resource: ResourceSpec
    submitted_at: float
    payload_ids: tuple[int, ...] = ()
    input_bytes: int = 0
    # stage-specific inputs: generator state, linkers, the MOF record...
    payload: object = field(default=None, compare=False, repr=False)
    step: Optional[str] = None
    ref: Optional[int] = None


@dataclass(frozen=True, slots=True)
class TaskResult:
    request_id: int
    started_at: float
    completed_at: float
    output_bytes: int
    outcome: Outcome
    value: object = field(default=None, compare=False, repr=False)
    slot: Optional[str] = None

    def __post_init__(self):
        if self.completed_at < self.started_at:
            raise ValueError("task completed before it started")
        if self.outcome is Outcome.Success and self.output_bytes <= 0:
            raise ValueError("successful tasks carry output")

"""Simulator and steering engine for a generative MOF-screening campaign."""

from .config import ConfigError, RunConfig
from .domain import AnchorType, MofStage, Outcome, StageKind, WorkerClass
from .engine import EngineSettings, Partition, PartitionPlan, SteeringEngine
from .lattice import lattice_strain
from .local import LocalRuntimeConfig, run_local
from .simcluster import SimCluster
from .stages import QualityModel, default_stage_models
from .telemetry import EventLog

__version__ = "0.1.0"

__all__ = [
    "AnchorType",
    "ConfigError",
    "EngineSettings",
    "EventLog",
    "LocalRuntimeConfig",
    "MofStage",
    "Outcome",
    "Partition",
    "PartitionPlan",
    "QualityModel",
    "RunConfig",
    "SimCluster",
    "StageKind",
    "SteeringEngine",
    "WorkerClass",
    "default_stage_models",
    "lattice_strain",
    "run_local",
]

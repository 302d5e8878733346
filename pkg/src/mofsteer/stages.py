"""Stochastic stand-ins for each pipeline stage.

Durations, survival, and the quality model that links generator quality to
MOF strain and capacity. All sampling functions take the rng explicitly;
either a ``random.Random`` or anything with the same ``random``/``gauss``/
``betavariate`` methods works.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
import random
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Iterator, Optional

from .domain import (
    AnchorType,
    GeneratorState,
    LinkerRecord,
    MofRecord,
    MofStage,
    ResourceSpec,
    StageKind,
)

_N = NormalDist()

KB = 1_000
MB = 1_000_000

STRICT_STRAIN = 0.10
TRAINING_STRAIN = 0.25

MIN_TRAINING_SET = 32
MAX_TRAINING_SET = 8192


@dataclass(frozen=True)
class StepModel:
    name: str
    mean_duration: float
    pass_probability: float = 1.0
    per_item: bool = False

    def __post_init__(self):
        if self.mean_duration <= 0:
            raise ValueError(f"{self.name}: mean_duration must be positive")
        if not 0.0 <= self.pass_probability <= 1.0:
            raise ValueError(f"{self.name}: pass_probability outside [0, 1]")


@dataclass(frozen=True)
class StageModel:
    stage: StageKind
    steps: tuple[StepModel, ...]
    resource: ResourceSpec
    input_bytes_range: tuple[int, int] = (100 * KB, 100 * KB)
    output_bytes_range: tuple[int, int] = (100 * KB, 100 * KB)
    duration_jitter_sigma: float = 0.1

    @property
    def mean_duration(self) -> float:
        return sum(s.mean_duration for s in self.steps)

    @property
    def conditional_pass_probability(self) -> float:
        return math.prod(s.pass_probability for s in self.steps)

    def step(self, name: str) -> StepModel:
        for s in self.steps:
            if s.name == name:
                return s
        raise KeyError(f"{self.stage.value} has no step {name!r}")

    def replace_step(self, name: str, **changes) -> "StageModel":
        steps = tuple(dataclasses.replace(s, **changes) if s.name == name else s for s in self.steps)
        return dataclasses.replace(self, steps=steps)


# Cumulative "remain" percentages per step, original structures = 100.
_REMAIN_LINKERS = {"generate": 100.0, "process": 22.8}
_REMAIN_MOFS = {
    "assemble": 100.0,
    "check": 99.90,
    "presim": 15.20,
    "stability": 8.60,
}


def default_stage_models(downstream_pass: float = 0.98) -> dict[StageKind, StageModel]:
    """Stage models with measured per-structure times and survival ratios."""
    r_mof = _REMAIN_MOFS
    gpu1 = ResourceSpec(cpu_cores=1, gpu_fraction=1.0)
    half = ResourceSpec(cpu_cores=1, gpu_fraction=0.5)
    core = ResourceSpec(cpu_cores=1)
    return {
        StageKind.GenerateLinkers: StageModel(
            StageKind.GenerateLinkers,
            (StepModel("generate", 0.37, per_item=True),),
            gpu1,
        ),
        StageKind.ProcessLinkers: StageModel(
            StageKind.ProcessLinkers,
            (StepModel("process", 0.12, _REMAIN_LINKERS["process"] / _REMAIN_LINKERS["generate"], per_item=True),),
            core,
            input_bytes_range=(100 * KB, 500 * KB),
            output_bytes_range=(100 * KB, 500 * KB),
        ),
        StageKind.AssembleMofs: StageModel(
            StageKind.AssembleMofs,
            (
                StepModel("assemble", 0.46, 1.0),
                StepModel("check", 2.56, r_mof["check"] / r_mof["assemble"]),
            ),
            core,
            input_bytes_range=(10 * MB, 40 * MB),
            output_bytes_range=(1 * MB, 2 * MB),
        ),
        StageKind.ValidateStructure: StageModel(
            StageKind.ValidateStructure,
            (
                StepModel("presim", 19.98, r_mof["presim"] / r_mof["check"]),
                StepModel("stability", 204.52, r_mof["stability"] / r_mof["presim"]),
            ),
            half,
            output_bytes_range=(400 * KB, 600 * KB),
        ),
        StageKind.OptimizeCells: StageModel(
            StageKind.OptimizeCells,
            (StepModel("optimize", 1517.53, downstream_pass),),
            ResourceSpec(whole_nodes=2),
        ),
        StageKind.EstimateAdsorption: StageModel(
            StageKind.EstimateAdsorption,
            (
                StepModel("charges", 211.78, downstream_pass),
                StepModel("adsorption", 1892.89, 1.0),
            ),
            core,
        ),
        StageKind.Retrain: StageModel(
            StageKind.Retrain,
            (StepModel("retrain", 96.50),),
            ResourceSpec(whole_nodes=1),
        ),
    }


def _lognormal(rng, mean: float, sigma: float) -> float:
    if sigma == 0:
        return mean
    return mean * math.exp(sigma * rng.gauss(0.0, 1.0) - 0.5 * sigma * sigma)


def sample_duration(model, rng, items: int = 1) -> float:
    """Lognormal duration whose mean is the model's mean (times ``items``).

    ``model`` may be a whole :class:`StageModel` or a ``(StageModel, step)``
    pair; per-item steps scale with ``items``.
    """
    if isinstance(model, tuple):
        stage_model, step = model
        steps = (stage_model.step(step) if isinstance(step, str) else step,)
        sigma = stage_model.duration_jitter_sigma
    else:
        steps = model.steps
        sigma = model.duration_jitter_sigma
    mean = sum(s.mean_duration * (items if s.per_item else 1) for s in steps)
    return _lognormal(rng, mean, sigma)


@dataclass(frozen=True)
class QualityModel:
    base_stable_fraction: float = 0.05
    max_stable_fraction: float = 0.12
    learning_rate: float = 0.0
    # linker latent quality ~ Beta with this concentration, mean moves
    # linearly from quality_mean_low (q=0) to quality_mean_high (q=1)
    quality_concentration: float = 20.0
    quality_mean_low: float = 0.3
    quality_mean_high: float = 0.7
    # share of pre-sim survivors with strain below the training cut at q=0
    training_pass_at_base: float = _REMAIN_MOFS["stability"] / _REMAIN_MOFS["presim"]
    capacity_median: float = 0.5
    capacity_strain_gain: float = 4.0
    capacity_quality_gain: float = 0.5
    capacity_sigma: float = 0.5

    def __post_init__(self):
        if not 0 <= self.base_stable_fraction <= self.max_stable_fraction <= 1:
            raise ValueError("need 0 <= base_stable_fraction <= max_stable_fraction <= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.quality_mean_low < self.quality_mean_high < 1:
            raise ValueError("need 0 < quality_mean_low < quality_mean_high < 1")
        if not self.base_stable_fraction < self.training_pass_at_base < 1:
            raise ValueError("training_pass_at_base must exceed base_stable_fraction")

    @property
    def strain_sigma(self) -> float:
        # lognormal shape that puts base_stable_fraction below 0.10 and
        # training_pass_at_base below 0.25 for the untrained generator
        gap = _N.inv_cdf(self.training_pass_at_base) - _N.inv_cdf(self.base_stable_fraction)
        return math.log(TRAINING_STRAIN / STRICT_STRAIN) / gap

    def stable_fraction(self, q: float) -> float:
        q = min(max(q, 0.0), 1.0)
        return self.base_stable_fraction + (self.max_stable_fraction - self.base_stable_fraction) * q

    def mean_linker_quality(self, q: float) -> float:
        return self.quality_mean_low + (self.quality_mean_high - self.quality_mean_low) * q

    def effective_quality(self, linker_quality: float) -> float:
        """Map a mean linker quality back onto the generator-quality scale."""
        return (linker_quality - self.quality_mean_low) / (self.quality_mean_high - self.quality_mean_low)

    def strain_median(self, linker_quality: float) -> float:
        p = self.base_stable_fraction + (
            self.max_stable_fraction - self.base_stable_fraction
        ) * self.effective_quality(linker_quality)
        p = min(max(p, 1e-6), 1 - 1e-6)
        return STRICT_STRAIN * math.exp(-self.strain_sigma * _N.inv_cdf(p))

    def capacity_location(self, strain: float, linker_quality: float) -> float:
        g = self.effective_quality(linker_quality)
        return self.capacity_median * math.exp(
            self.capacity_strain_gain * (TRAINING_STRAIN - strain) + self.capacity_quality_gain * g
        )


def generate_linker_batch(
    gen: GeneratorState,
    batch_size: int,
    anchor_type: AnchorType,
    rng,
    qm: QualityModel = QualityModel(),
    ids: Optional[Iterable[int]] = None,
    created_at: float = 0.0,
) -> list[LinkerRecord]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    ids = iter(ids) if ids is not None else itertools.count()
    mean = qm.mean_linker_quality(gen.quality)
    a = qm.quality_concentration * mean
    b = qm.quality_concentration * (1.0 - mean)
    anchor = AnchorType(anchor_type)
    return [
        LinkerRecord(next(ids), anchor, created_at, rng.betavariate(a, b), gen.version)
        for _ in range(batch_size)
    ]


def stability_outcome(
    mof: Optional[MofRecord], linker_quality: float, qm: QualityModel, rng
) -> tuple[float, bool, bool]:
    """Draw a strain; return ``(strain, stable_for_training, stable_strict)``."""
    if mof is not None and mof.stage is not MofStage.PreSimChecked:
        raise ValueError(f"MOF {mof.id} has not passed the pre-simulation check")
    strain = qm.strain_median(linker_quality) * math.exp(qm.strain_sigma * rng.gauss(0.0, 1.0))
    return strain, strain < TRAINING_STRAIN, strain < STRICT_STRAIN


def charges_outcome(model: StageModel, rng) -> bool:
    """False when partial-charge assignment fails (the MOF is dropped)."""
    return rng.random() < model.step("charges").pass_probability


def adsorption_outcome(mof: MofRecord, qm: QualityModel, rng) -> float:
    """CO2 capacity (mol/kg, arbitrary scale) for a MOF with charges."""
    if mof.stage is not MofStage.ChargesKnown:
        raise ValueError(f"MOF {mof.id} has no partial charges")
    loc = qm.capacity_location(mof.strain, mof.linker_quality)
    if qm.capacity_sigma == 0:
        return loc
    return loc * math.exp(qm.capacity_sigma * rng.gauss(0.0, 1.0))


def retrain_duration(n: int) -> float:
    return 30.0 + 270.0 * (n - MIN_TRAINING_SET) / (MAX_TRAINING_SET - MIN_TRAINING_SET)


def retrain_update(
    gen: GeneratorState, n: int, qm: QualityModel, now: float = 0.0
) -> tuple[GeneratorState, float]:
    if not MIN_TRAINING_SET <= n <= MAX_TRAINING_SET:
        raise ValueError(f"training set size {n} outside [{MIN_TRAINING_SET}, {MAX_TRAINING_SET}]")
    q = gen.quality + (1.0 - gen.quality) * (1.0 - math.exp(-qm.learning_rate * n))
    new = GeneratorState(
        version=gen.version + 1,
        quality=min(q, 1.0),
        examples_seen=gen.examples_seen + n,
        last_retrain_at=now,
    )
    return new, retrain_duration(n)


@dataclass(frozen=True)
class TrainingSet:
    mof_ids: tuple[int, ...]
    linker_ids: tuple[int, ...]
    by_capacity: bool = False

    @property
    def size(self) -> int:
        return len(self.mof_ids)

    def __bool__(self) -> bool:
        return bool(self.mof_ids)


CAPACITY_SWITCH = 64


def select_training_set(db, switch_after: int = CAPACITY_SWITCH) -> TrainingSet:
    """Pick retraining MOFs from the campaign database.

    Lowest-strain half of the training-stable MOFs until ``switch_after``
    adsorption results exist, then the highest-capacity half.
    """
    by_capacity = db.adsorption_count >= switch_after
    ranked = db.ranked_by_capacity() if by_capacity else db.ranked_by_strain()
    if len(ranked) < MIN_TRAINING_SET:
        return TrainingSet((), (), by_capacity)
    n = min(max(len(ranked) // 2, MIN_TRAINING_SET), MAX_TRAINING_SET)
    chosen = tuple(ranked[:n])
    linkers = dict.fromkeys(lid for mid in chosen for lid in db.linkers_of(mid))
    return TrainingSet(chosen, tuple(linkers), by_capacity)


@dataclass
class ChainSurvival:
    linkers: int
    linkers_processed: int
    mofs: int
    mofs_checked: int
    mofs_presim: int
    mofs_stable: int

    @property
    def process_survival(self) -> float:
        return self.linkers_processed / self.linkers

    @property
    def stability_survival(self) -> float:
        return self.mofs_stable / self.mofs


def simulate_chain(
    n_linkers: int,
    rng,
    models: Optional[dict] = None,
    qm: QualityModel = QualityModel(),
    gen: GeneratorState = GeneratorState(),
) -> ChainSurvival:
    """Push ``n_linkers`` (and as many MOFs) through the screening steps."""
    models = models or default_stage_models()
    p_process = models[StageKind.ProcessLinkers].conditional_pass_probability
    linkers = generate_linker_batch(gen, n_linkers, AnchorType.BCA, rng, qm)
    kept = [l for l in linkers if rng.random() < p_process]
    p_check = models[StageKind.AssembleMofs].step("check").pass_probability
    p_presim = models[StageKind.ValidateStructure].step("presim").pass_probability
    checked = presim = stable = 0
    pool = kept or linkers
    for i in range(n_linkers):
        if rng.random() >= p_check:
            continue
        checked += 1
        if rng.random() >= p_presim:
            continue
        presim += 1
        quality = sum(pool[(8 * i + k) % len(pool)].latent_quality for k in range(8)) / 8
        _, ok, _ = stability_outcome(None, quality, qm, rng)
        stable += ok
    return ChainSurvival(n_linkers, len(kept), n_linkers, checked, presim, stable)

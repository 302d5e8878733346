"""Stub task bodies shared by the simulated and the local backend.

A task body never does real chemistry. Given the request and an rng stream
it returns how long the work takes and what it would have produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from . import lattice
from .domain import (
    AnchorType,
    MofRecord,
    MofStage,
    Outcome,
    StageKind,
    TaskRequest,
)
from .stages import (
    QualityModel,
    StageModel,
    adsorption_outcome,
    charges_outcome,
    generate_linker_batch,
    retrain_duration,
    sample_duration,
    stability_outcome,
)

# linker ids are task_id * stride + index within the batch
LINKER_ID_STRIDE = 10_000


@dataclass(frozen=True, slots=True)
class Execution:
    duration: float
    outcome: Outcome
    value: object = None
    # number reported in the telemetry log: strain, capacity, survivors...
    metric: object = None


@dataclass(frozen=True)
class TaskContext:
    models: Mapping[StageKind, StageModel]
    quality: QualityModel
    synthesize_cells: bool = True


def _generate(req: TaskRequest, rng, ctx: TaskContext, start: float) -> Execution:
    gen, anchor, batch_size = req.payload
    model = ctx.models[StageKind.GenerateLinkers]
    first = req.id * LINKER_ID_STRIDE
    linkers = generate_linker_batch(
        gen, batch_size, AnchorType(anchor), rng, ctx.quality,
        ids=range(first, first + batch_size), created_at=start,
    )
    return Execution(sample_duration(model, rng, batch_size), Outcome.Success, tuple(linkers), batch_size)


def _process(req: TaskRequest, rng, ctx: TaskContext, start: float) -> Execution:
    linkers = req.payload
    model = ctx.models[StageKind.ProcessLinkers]
    p = model.conditional_pass_probability
    kept = tuple(l for l in linkers if rng.random() < p)
    outcome = Outcome.Success if kept else Outcome.ScreenedOut
    return Execution(sample_duration(model, rng, len(linkers)), outcome, kept, len(kept))


def _assemble(req: TaskRequest, rng, ctx: TaskContext, start: float) -> Execution:
    linkers = req.payload
    model = ctx.models[StageKind.AssembleMofs]
    t_assemble = sample_duration((model, "assemble"), rng)
    t_check = sample_duration((model, "check"), rng)
    quality = sum(l.latent_quality for l in linkers) / len(linkers)
    mof = MofRecord.assembled(req.id, (l.id for l in linkers), start + t_assemble, quality)
    end = start + t_assemble + t_check
    if rng.random() < model.step("check").pass_probability:
        return Execution(end - start, Outcome.Success, mof.advance(MofStage.AssemblyChecked, end))
    return Execution(end - start, Outcome.ScreenedOut, mof.advance(MofStage.Discarded, end))


def _validate(req: TaskRequest, rng, ctx: TaskContext, start: float) -> Execution:
    mof: MofRecord = req.payload
    model = ctx.models[StageKind.ValidateStructure]
    duration = sample_duration((model, "presim"), rng)
    if rng.random() >= model.step("presim").pass_probability:
        return Execution(duration, Outcome.ScreenedOut, mof.advance(MofStage.Discarded, start + duration))
    mof = mof.advance(MofStage.PreSimChecked, start + duration)
    duration += sample_duration((model, "stability"), rng)
    strain, _, _ = stability_outcome(mof, mof.linker_quality, ctx.quality, rng)
    fields = {}
    if ctx.synthesize_cells:
        r1, r2 = lattice.synthesize_cells(strain, rng)
        strain = lattice.lattice_strain(r1, r2)
        fields = {"cell_initial": r1, "cell_final": r2}
    mof = mof.advance(MofStage.StabilityKnown, start + duration, strain=strain, **fields)
    return Execution(duration, Outcome.Success, mof, strain)


def _optimize(req: TaskRequest, rng, ctx: TaskContext, start: float) -> Execution:
    mof: MofRecord = req.payload
    model = ctx.models[StageKind.OptimizeCells]
    duration = sample_duration(model, rng)
    end = start + duration
    if rng.random() < model.conditional_pass_probability:
        return Execution(duration, Outcome.Success, mof.advance(MofStage.CellOptimized, end))
    return Execution(duration, Outcome.Failed, mof.advance(MofStage.Discarded, end))


def _estimate(req: TaskRequest, rng, ctx: TaskContext, start: float) -> Execution:
    mof: MofRecord = req.payload
    model = ctx.models[StageKind.EstimateAdsorption]
    duration = sample_duration((model, req.step), rng)
    t = start + duration
    if req.step == "charges":
        if charges_outcome(model, rng):
            return Execution(duration, Outcome.Success, mof.advance(MofStage.ChargesKnown, t))
        return Execution(duration, Outcome.ScreenedOut, mof.advance(MofStage.Discarded, t))
    capacity = adsorption_outcome(mof, ctx.quality, rng)
    return Execution(duration, Outcome.Success, mof.advance(MofStage.CapacityKnown, t, capacity=capacity), capacity)


def _retrain(req: TaskRequest, rng, ctx: TaskContext, start: float) -> Execution:
    training_set, _ = req.payload
    return Execution(retrain_duration(training_set.size), Outcome.Success, training_set, training_set.size)


_BODIES = {
    StageKind.GenerateLinkers: _generate,
    StageKind.ProcessLinkers: _process,
    StageKind.AssembleMofs: _assemble,
    StageKind.ValidateStructure: _validate,
    StageKind.OptimizeCells: _optimize,
    StageKind.EstimateAdsorption: _estimate,
    StageKind.Retrain: _retrain,
}


def execute(req: TaskRequest, rng, ctx: TaskContext, start: float) -> Execution:
    """Run the stub body for ``req`` as if it began at ``start``."""
    return _BODIES[req.stage](req, rng, ctx, start)

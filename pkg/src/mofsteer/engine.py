"""The steering engine: queues, policies, and slot bookkeeping.

The engine never places work on hardware itself. It decides *what* runs
next whenever a worker class has a free slot, hands the request to a
backend, and reacts to two notifications per task: the control message
(slot is free again) and the payload (results can be consumed).
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from itertools import islice
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol

from .database import CampaignDatabase
from .domain import (
    AnchorType,
    GeneratorState,
    MofRecord,
    MofStage,
    NodeSpec,
    Outcome,
    ResourceSpec,
    StageKind,
    TaskRequest,
    TaskResult,
    WorkerClass,
)
from .stages import (
    CAPACITY_SWITCH,
    TRAINING_STRAIN,
    QualityModel,
    StageModel,
    TrainingSet,
    retrain_update,
    select_training_set,
)

ASSEMBLED = "assembled"
STABLE = "stable"


# partition ------------------------------------------------------------------


def validator_slots_per_node(node: NodeSpec = NodeSpec()) -> int:
    return 2 * node.gpus


def scavenger_cores_per_node(node: NodeSpec = NodeSpec()) -> int:
    # each validator slot pins one core; the rest are free for scavenging
    return node.cpu_cores - validator_slots_per_node(node)


@dataclass(frozen=True)
class Partition:
    generator_nodes: int
    validator_nodes: int
    optimizer_units: int
    trainer_nodes: int
    node: NodeSpec = NodeSpec()

    def __post_init__(self):
        for name in ("generator_nodes", "validator_nodes", "optimizer_units", "trainer_nodes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total_nodes(self) -> int:
        return self.generator_nodes + self.validator_nodes + 2 * self.optimizer_units + self.trainer_nodes

    def nodes_of(self, worker: WorkerClass) -> int:
        return {
            WorkerClass.GeneratorWorker: self.generator_nodes,
            WorkerClass.ValidatorWorker: self.validator_nodes,
            WorkerClass.ScavengerWorker: 0,
            WorkerClass.TrainerWorker: self.trainer_nodes,
            WorkerClass.OptimizerWorker: 2 * self.optimizer_units,
        }[worker]

    def slots(self, worker: WorkerClass) -> int:
        return {
            WorkerClass.GeneratorWorker: self.generator_nodes * self.node.gpus,
            WorkerClass.ValidatorWorker: self.validator_nodes * validator_slots_per_node(self.node),
            WorkerClass.ScavengerWorker: self.validator_nodes * scavenger_cores_per_node(self.node),
            WorkerClass.TrainerWorker: self.trainer_nodes,
            WorkerClass.OptimizerWorker: self.optimizer_units,
        }[worker]


@dataclass(frozen=True)
class PartitionPlan:
    """How a node count is split between worker classes.

    Fractions are rounded to whole nodes (whole node pairs for optimizers).
    Explicit counts, when given, win over fractions; validators take
    whatever is left.
    """

    generator_fraction: float = 1 / 32
    optimizer_fraction: float = 0.125
    trainer_nodes: int = 1
    min_generator_nodes: int = 1
    min_validator_nodes: int = 1
    generator_nodes: Optional[int] = None
    optimizer_units: Optional[int] = None
    validator_nodes: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.generator_fraction <= 1 or not 0 <= self.optimizer_fraction <= 1:
            raise ValueError("partition fractions must lie in [0, 1]")
        if self.generator_fraction + self.optimizer_fraction > 1:
            raise ValueError("partition fractions sum to more than 1")
        if self.trainer_nodes < 0:
            raise ValueError("trainer_nodes must be non-negative")

    def layout(self, nodes: int, node: NodeSpec = NodeSpec()) -> Partition:
        if nodes < 1:
            raise ValueError("need at least one node")
        gen = self.generator_nodes
        if gen is None:
            gen = max(self.min_generator_nodes, math.floor(nodes * self.generator_fraction + 0.5))
        opt = self.optimizer_units
        if opt is None:
            opt = math.floor(nodes * self.optimizer_fraction / 2 + 0.5)
        val = self.validator_nodes
        if val is None:
            val = nodes - gen - 2 * opt - self.trainer_nodes
            if val < self.min_validator_nodes:
                raise ValueError(
                    f"{nodes} nodes leave {val} validator nodes after {gen} generator, "
                    f"{2 * opt} optimizer and {self.trainer_nodes} trainer nodes"
                )
        part = Partition(gen, val, opt, self.trainer_nodes, node)
        if part.total_nodes != nodes:
            raise ValueError(f"partition uses {part.total_nodes} nodes, cluster has {nodes}")
        return part


# policy helpers --------------------------------------------------------------


def assembly_trigger(pools: Mapping[AnchorType, object], per_type: int = 4) -> bool:
    """True when every anchor type has at least ``per_type`` linkers."""
    return all(len(pools.get(a, ())) >= per_type for a in AnchorType)


def assembly_worker_budget(validator_slots: int, per_worker: int = 256) -> int:
    if validator_slots < 0:
        raise ValueError("validator_slots must be non-negative")
    return -(-validator_slots // per_worker)


@dataclass
class RetrainGate:
    qualifying: int = 0
    adsorption_results: int = 0
    in_flight: bool = False
    qualifying_at_last_start: Optional[int] = None


def retrain_trigger(gate: RetrainGate, threshold: int = 64) -> bool:
    grew = gate.qualifying_at_last_start is None or gate.qualifying > gate.qualifying_at_last_start
    return gate.qualifying >= threshold and not gate.in_flight and grew


def _most_recent(pool: deque, k: int) -> tuple:
    return tuple(islice(reversed(pool), k))[::-1]


# engine ----------------------------------------------------------------------


class Backend(Protocol):
    def now(self) -> float: ...

    def submit(self, request: TaskRequest) -> None: ...

    def call_later(self, delay: float, fn: Callable[[], None]) -> None: ...

    def reassign(self, from_role: WorkerClass, to_role: WorkerClass) -> bool: ...


class UnknownRequest(KeyError):
    pass


@dataclass(frozen=True)
class EngineSettings:
    batch_size: int = 64
    linker_pool_size: int = 1024
    linkers_per_type: int = 4
    validators_per_assembler: int = 256
    # concurrent single-MOF assembly processes behind one assembly worker
    assembly_processes_per_worker: int = 20
    # assembly pauses while this many MOFs per validator slot are waiting
    stack_cap_factor: float = 8.0
    retrain_threshold: int = 64
    capacity_switch: int = CAPACITY_SWITCH
    retraining_enabled: bool = True
    reallocation_enabled: bool = False
    realloc_high_water_factor: float = 4.0
    realloc_window: float = 120.0
    min_generator_nodes: int = 1
    max_generator_nodes: Optional[int] = None
    min_validator_nodes: int = 1
    max_validator_nodes: Optional[int] = None

    def __post_init__(self):
        if not 1 <= self.batch_size <= 10_000:
            raise ValueError("batch_size must lie in [1, 10000]")
        if self.linker_pool_size < self.linkers_per_type:
            raise ValueError("linker_pool_size smaller than linkers_per_type")
        if self.assembly_processes_per_worker < 1 or self.validators_per_assembler < 1:
            raise ValueError("assembly settings must be positive")
        if self.retrain_threshold < 1:
            raise ValueError("retrain_threshold must be positive")


_RESOURCES = {
    WorkerClass.GeneratorWorker: ResourceSpec(cpu_cores=1, gpu_fraction=1.0),
    WorkerClass.ValidatorWorker: ResourceSpec(cpu_cores=1, gpu_fraction=0.5),
    WorkerClass.ScavengerWorker: ResourceSpec(cpu_cores=1),
    WorkerClass.TrainerWorker: ResourceSpec(whole_nodes=1),
    WorkerClass.OptimizerWorker: ResourceSpec(whole_nodes=2),
}

_ROLE_CLASSES = {
    WorkerClass.GeneratorWorker: (WorkerClass.GeneratorWorker,),
    WorkerClass.ValidatorWorker: (WorkerClass.ValidatorWorker, WorkerClass.ScavengerWorker),
}


class SteeringEngine:
    """Event-driven policies over one serialized stream of notifications."""

    def __init__(
        self,
        partition: Partition,
        settings: EngineSettings = EngineSettings(),
        quality: QualityModel = QualityModel(),
        payload_latency: float = 0.1,
    ):
        self.partition = partition
        self.settings = settings
        self.quality = quality
        self.payload_latency = payload_latency
        self.capacity = {c: partition.slots(c) for c in WorkerClass}
        self.nodes = {c: partition.nodes_of(c) for c in WorkerClass}
        self.in_use = {c: 0 for c in WorkerClass}
        self.reserved = {c: 0 for c in WorkerClass}

        self.pools = {a: deque(maxlen=settings.linker_pool_size) for a in AnchorType}
        self.stack: list[MofRecord] = []
        self.heap: list[tuple[float, int, int, MofRecord]] = []
        self.pending: deque = deque()
        self.db = CampaignDatabase()
        self.generator = GeneratorState()
        self.gate = RetrainGate()
        self._retrain_scheduled = False

        self.inflight: dict[int, TaskRequest] = {}
        self.awaiting_payload: dict[int, TaskRequest] = {}
        self.assembly_in_flight = 0
        self._next_id = 1
        self._push_seq = 0
        self._anchor_turn = 0
        self._high_since: Optional[float] = None
        self._low_since: Optional[float] = None
        self._draining = False
        self.backend: Optional[Backend] = None
        self.recorder = None
        self._idle = {
            WorkerClass.GeneratorWorker: self._next_generation,
            WorkerClass.ValidatorWorker: self._next_validation,
            WorkerClass.OptimizerWorker: self._next_optimization,
            WorkerClass.ScavengerWorker: self._next_scavenger_task,
            WorkerClass.TrainerWorker: self._next_retrain,
        }
        self._refresh_limits()

    # wiring -------------------------------------------------------------------

    def attach(self, backend: Backend, recorder) -> None:
        self.backend = backend
        self.recorder = recorder

    def start(self) -> None:
        for cls in (WorkerClass.GeneratorWorker, WorkerClass.ValidatorWorker,
                    WorkerClass.OptimizerWorker, WorkerClass.ScavengerWorker):
            self.fill(cls)

    def free(self, cls: WorkerClass) -> int:
        return self.capacity[cls] - self.reserved[cls] - self.in_use[cls]

    def _refresh_limits(self) -> None:
        # both limits follow the validator capacity, which only moves on reallocation
        validators = self.capacity[WorkerClass.ValidatorWorker]
        self.stack_cap = max(1, int(self.settings.stack_cap_factor * validators))
        budget = assembly_worker_budget(validators, self.settings.validators_per_assembler)
        self.assembly_limit = budget * self.settings.assembly_processes_per_worker

    def _request(self, stage, worker, payload, payload_ids=(), step=None, ref=None) -> TaskRequest:
        rid = self._next_id
        self._next_id += 1
        return TaskRequest(
            id=rid, stage=stage, worker=worker, resource=_RESOURCES[worker],
            submitted_at=self.backend.now(), payload_ids=payload_ids,
            payload=payload, step=step, ref=ref,
        )

    def fill(self, cls: WorkerClass) -> int:
        """Offer every free slot of ``cls`` to the policy; returns tasks submitted."""
        n = 0
        free = self.free(cls)
        while free > 0:
            req = self.on_worker_idle(cls)
            if req is None:
                break
            self.in_use[cls] += 1
            free -= 1
            n += 1
            self.inflight[req.id] = req
            self.backend.submit(req)
        return n

    # policy ---------------------------------------------------------------------

    def on_worker_idle(self, cls: WorkerClass) -> Optional[TaskRequest]:
        """Next request for a free slot of ``cls``, or ``None`` to stay idle."""
        try:
            policy = self._idle[cls]
        except KeyError:
            raise ValueError(f"unknown worker class {cls!r}") from None
        return policy()

    def _next_generation(self) -> TaskRequest:
        anchor = (AnchorType.BCA, AnchorType.BZN)[self._anchor_turn % 2]
        self._anchor_turn += 1
        return self._request(
            StageKind.GenerateLinkers, WorkerClass.GeneratorWorker,
            (self.generator, anchor.value, self.settings.batch_size),
        )

    def _next_validation(self) -> Optional[TaskRequest]:
        if not self.stack:
            return None
        now = self.backend.now()
        mof = self.stack.pop()
        req = self._request(StageKind.ValidateStructure, WorkerClass.ValidatorWorker, mof, (mof.id,))
        self.recorder.queue_pop(now, ASSEMBLED, mof.id, req.id)
        self._watch_stack(now)
        return req

    def _next_optimization(self) -> Optional[TaskRequest]:
        if not self.heap:
            return None
        strain, _, mid, mof = heapq.heappop(self.heap)
        req = self._request(StageKind.OptimizeCells, WorkerClass.OptimizerWorker, mof, (mid,))
        self.recorder.queue_pop(self.backend.now(), STABLE, mid, req.id, strain)
        return req

    def _next_scavenger_task(self) -> Optional[TaskRequest]:
        # downstream work already earned goes ahead of new assemblies
        if self.pending:
            stage, step, payload, ids, ref = self.pending.popleft()
            return self._request(stage, WorkerClass.ScavengerWorker, payload, ids, step, ref)
        if (
            self.assembly_in_flight < self.assembly_limit
            and len(self.stack) < self.stack_cap
            and assembly_trigger(self.pools, self.settings.linkers_per_type)
        ):
            k = self.settings.linkers_per_type
            linkers = _most_recent(self.pools[AnchorType.BCA], k) + _most_recent(self.pools[AnchorType.BZN], k)
            self.assembly_in_flight += 1
            return self._request(
                StageKind.AssembleMofs, WorkerClass.ScavengerWorker, linkers, tuple(l.id for l in linkers)
            )
        return None

    def _next_retrain(self) -> Optional[TaskRequest]:
        if not (self.settings.retraining_enabled and retrain_trigger(self.gate, self.settings.retrain_threshold)):
            return None
        training_set = select_training_set(self.db, self.settings.capacity_switch)
        if not training_set:
            return None
        self.gate.in_flight = True
        self.gate.qualifying_at_last_start = self.gate.qualifying
        return self._request(
            StageKind.Retrain, WorkerClass.TrainerWorker, (training_set, self.generator.version + 1)
        )

    def _maybe_retrain(self) -> None:
        if (
            not self.settings.retraining_enabled
            or self._retrain_scheduled
            or self.capacity[WorkerClass.TrainerWorker] == 0
            or not retrain_trigger(self.gate, self.settings.retrain_threshold)
        ):
            return
        self._retrain_scheduled = True

        def submit():
            self._retrain_scheduled = False
            self.fill(WorkerClass.TrainerWorker)

        # picking the training set reads the database, so it pays the payload latency
        self.backend.call_later(self.payload_latency, submit)

    # notifications -------------------------------------------------------------

    def on_task_result(self, result: TaskResult) -> None:
        """Control-path notification: the slot is free again."""
        req = self.inflight.pop(result.request_id, None)
        if req is None:
            raise UnknownRequest(result.request_id)
        self.awaiting_payload[req.id] = req
        cls = req.worker
        self.in_use[cls] -= 1
        if req.stage is StageKind.AssembleMofs:
            self.assembly_in_flight -= 1
        if cls is WorkerClass.TrainerWorker:
            return
        self.fill(cls)
        if cls is WorkerClass.ValidatorWorker:
            self.fill(WorkerClass.ScavengerWorker)

    def on_payload_ready(self, result: TaskResult) -> None:
        """Data-path notification: the task's outputs can be consumed."""
        req = self.awaiting_payload.pop(result.request_id, None)
        if req is None:
            raise UnknownRequest(result.request_id)
        now = self.backend.now()
        stage = req.stage
        value = result.value
        if stage is StageKind.GenerateLinkers:
            self.pending.append((StageKind.ProcessLinkers, None, value, (), req.id))
            self.fill(WorkerClass.ScavengerWorker)
        elif stage is StageKind.ProcessLinkers:
            if value:
                self.db.add_linkers(value)
                for l in value:
                    self.pools[l.anchor_type].append(l)
                self.fill(WorkerClass.ScavengerWorker)
        elif stage is StageKind.AssembleMofs:
            if result.outcome is Outcome.Success:
                self.stack.append(value)
                self.recorder.queue_push(now, ASSEMBLED, value.id)
                self._watch_stack(now)
                self.fill(WorkerClass.ValidatorWorker)
        elif stage is StageKind.ValidateStructure:
            self.db.record(value)
            if value.strain is not None:
                if value.strain < TRAINING_STRAIN:
                    self.gate.qualifying += 1
                    self._push_seq += 1
                    heapq.heappush(self.heap, (value.strain, -self._push_seq, value.id, value))
                    self.recorder.queue_push(now, STABLE, value.id, value.strain)
                    self.fill(WorkerClass.OptimizerWorker)
                self._maybe_retrain()
        elif stage is StageKind.OptimizeCells:
            self.db.record(value)
            if result.outcome is Outcome.Success:
                self.pending.append((StageKind.EstimateAdsorption, "charges", value, (value.id,), None))
                self.fill(WorkerClass.ScavengerWorker)
        elif stage is StageKind.EstimateAdsorption:
            self.db.record(value)
            if req.step == "charges" and result.outcome is Outcome.Success:
                self.pending.append((StageKind.EstimateAdsorption, "adsorption", value, (value.id,), None))
                self.fill(WorkerClass.ScavengerWorker)
            elif value.stage is MofStage.CapacityKnown:
                self.gate.adsorption_results += 1
        elif stage is StageKind.Retrain:
            training_set, _ = req.payload
            self.generator, _ = retrain_update(self.generator, training_set.size, self.quality, now)
            self.gate.in_flight = False
            self._maybe_retrain()

    # reallocation ----------------------------------------------------------------

    def _watch_stack(self, now: float) -> None:
        if not self.settings.reallocation_enabled or self._draining:
            return
        depth = len(self.stack)
        validators = self.capacity[WorkerClass.ValidatorWorker]
        if depth > self.settings.realloc_high_water_factor * validators:
            self._low_since = None
            if self._high_since is None:
                self._high_since = now
            elif now - self._high_since >= self.settings.realloc_window:
                self._high_since = None
                self.reallocate("pressure")
        elif depth == 0 and self.free(WorkerClass.ValidatorWorker) > 0:
            self._high_since = None
            if self._low_since is None:
                self._low_since = now
            elif now - self._low_since >= self.settings.realloc_window:
                self._low_since = None
                self.reallocate("starvation")
        else:
            self._high_since = self._low_since = None

    def reallocate(self, signal: str) -> Optional[dict[WorkerClass, int]]:
        """Move one node between generation and validation.

        ``"pressure"`` (validators cannot keep up) turns a generator node into
        a validator node; ``"starvation"`` does the reverse. Returns the slot
        change per class once the move is started, ``None`` if a bound or an
        ongoing move prevents it.
        """
        s = self.settings
        gen_nodes = self.nodes[WorkerClass.GeneratorWorker]
        val_nodes = self.nodes[WorkerClass.ValidatorWorker]
        if signal == "pressure":
            src, dst = WorkerClass.GeneratorWorker, WorkerClass.ValidatorWorker
            if gen_nodes - 1 < s.min_generator_nodes or (s.max_validator_nodes is not None and val_nodes + 1 > s.max_validator_nodes):
                return None
        elif signal == "starvation":
            src, dst = WorkerClass.ValidatorWorker, WorkerClass.GeneratorWorker
            if val_nodes - 1 < s.min_validator_nodes or (s.max_generator_nodes is not None and gen_nodes + 1 > s.max_generator_nodes):
                return None
        else:
            raise ValueError(f"unknown signal {signal!r}")
        if self._draining or not self.backend.reassign(src, dst):
            return None
        self._draining = True
        delta = self.partition_delta(src, dst)
        for cls in _ROLE_CLASSES[src]:
            self.reserved[cls] -= delta[cls]
        return delta

    def partition_delta(self, src: WorkerClass, dst: WorkerClass) -> dict[WorkerClass, int]:
        node = self.partition.node
        per_node = {
            WorkerClass.GeneratorWorker: Partition(1, 0, 0, 0, node),
            WorkerClass.ValidatorWorker: Partition(0, 1, 0, 0, node),
        }
        delta = {c: 0 for c in WorkerClass}
        for cls in _ROLE_CLASSES[src]:
            delta[cls] -= per_node[src].slots(cls)
        for cls in _ROLE_CLASSES[dst]:
            delta[cls] += per_node[dst].slots(cls)
        return delta

    def on_partition_changed(self, src: WorkerClass, dst: WorkerClass) -> None:
        """A drained node switched role; move its capacity across."""
        delta = self.partition_delta(src, dst)
        for cls in _ROLE_CLASSES[src]:
            self.reserved[cls] += delta[cls]
        for cls, d in delta.items():
            self.capacity[cls] += d
        self._refresh_limits()
        self.nodes[src] -= 1
        self.nodes[dst] += 1
        self._draining = False
        for cls in _ROLE_CLASSES[dst]:
            self.fill(cls)

"""Deterministic discrete-event model of the cluster.

One kernel orders every event by ``(time, sequence)``; nothing runs
concurrently, so a given configuration and seed always produce the same log.
"""

from __future__ import annotations

import contextlib
import gc
import hashlib
import heapq
import random
from dataclasses import dataclass
from typing import Callable, Mapping, Optional

from .domain import NodeSpec, StageKind, TaskRequest, TaskResult, WorkerClass
from .engine import Partition, SteeringEngine, scavenger_cores_per_node, validator_slots_per_node
from .stages import StageModel, default_stage_models
from .tasks import TaskContext, execute
from .telemetry import EventLog, Recorder


def rng_stream(seed: int, key: str) -> random.Random:
    """Independent ``random.Random`` for ``key``, stable across runs and platforms."""
    digest = hashlib.blake2b(f"{seed}:{key}".encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


# data fabric --------------------------------------------------------------------


@dataclass(frozen=True)
class DataFabricModel:
    control_latency: float = 0.001
    payload_processing_latency: float = 0.1
    bandwidth: float = 1e9

    def __post_init__(self):
        if min(self.control_latency, self.payload_processing_latency, self.bandwidth) <= 0:
            raise ValueError("fabric latencies and bandwidth must be positive")


def transfer_time(nbytes: int, fabric: DataFabricModel = DataFabricModel()) -> float:
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    return fabric.control_latency + nbytes / fabric.bandwidth


def payload_sizes(stage: StageKind, rng, models: Optional[Mapping[StageKind, StageModel]] = None) -> tuple[int, int]:
    """Uniform input and output sizes within the stage's byte ranges."""
    model = (models or _DEFAULT_MODELS)[stage if isinstance(stage, StageKind) else StageKind(stage)]
    lo, hi = model.input_bytes_range
    n_in = lo if lo == hi else lo + int(rng.random() * (hi - lo + 1))
    lo, hi = model.output_bytes_range
    n_out = lo if lo == hi else lo + int(rng.random() * (hi - lo + 1))
    return n_in, n_out


_DEFAULT_MODELS = default_stage_models()


# allocation ---------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Placement:
    label: str
    nodes: tuple[int, ...]
    gpu: int = -1
    gpu_share: float = 0.0
    cores: int = 0
    epoch: int = 0
    whole: bool = False
    # position in the free-slot heap; lower keys are handed out first
    key: tuple = ()


@dataclass(slots=True)
class NodeState:
    role: WorkerClass
    cores_used: int
    gpu_used: list
    whole: bool = False
    busy: int = 0
    draining: bool = False
    epoch: int = 0


class Cluster:
    """Slots carved out of homogeneous nodes, with conservation checks.

    Generator and validator nodes hand out fractional slots; trainer and
    optimizer nodes are only ever taken whole. Scavenger slots are the
    cores of validator nodes not pinned to a validator.
    """

    def __init__(self, partition: Partition, node: NodeSpec = NodeSpec()):
        self.spec = node
        self.nodes: list[NodeState] = []
        self.free: dict[WorkerClass, list] = {c: [] for c in WorkerClass}
        roles = (
            [WorkerClass.GeneratorWorker] * partition.generator_nodes
            + [WorkerClass.ValidatorWorker] * partition.validator_nodes
            + [WorkerClass.OptimizerWorker] * (2 * partition.optimizer_units)
            + [WorkerClass.TrainerWorker] * partition.trainer_nodes
        )
        for role in roles:
            self.nodes.append(NodeState(role, 0, [0.0] * node.gpus))
            self._add_slots(len(self.nodes) - 1)

    def _add_slots(self, i: int) -> None:
        n = self.nodes[i]
        e = n.epoch
        spec = self.spec
        if n.role is WorkerClass.GeneratorWorker:
            for g in range(spec.gpus):
                self._push(WorkerClass.GeneratorWorker, Placement(f"n{i}/g{g}", (i,), g, 1.0, 1, e, key=(i, g, 0)))
        elif n.role is WorkerClass.ValidatorWorker:
            per_gpu = validator_slots_per_node(spec) // spec.gpus
            # slots sharing a GPU are adjacent in heap order, so they pair up
            for g in range(spec.gpus):
                for s in range(per_gpu):
                    core = g * per_gpu + s
                    self._push(
                        WorkerClass.ValidatorWorker,
                        Placement(f"n{i}/g{g}/c{core}", (i,), g, 1.0 / per_gpu, 1, e, key=(i, g, s)),
                    )
            pinned = validator_slots_per_node(spec)
            for c in range(pinned, pinned + scavenger_cores_per_node(spec)):
                self._push(WorkerClass.ScavengerWorker, Placement(f"n{i}/c{c}", (i,), -1, 0.0, 1, e, key=(i, c, 0)))
        else:
            heapq.heappush(self.free[n.role], ((i, 0, 0), i))

    def _push(self, worker: WorkerClass, p: Placement) -> None:
        heapq.heappush(self.free[worker], (p.key, p))

    def free_count(self, worker: WorkerClass) -> int:
        """Free slots of ``worker`` (may include stale entries of draining nodes)."""
        return len(self.free[worker])

    def _pop_fractional(self, worker: WorkerClass) -> Optional[Placement]:
        heap = self.free[worker]
        while heap:
            _, p = heapq.heappop(heap)
            n = self.nodes[p.nodes[0]]
            if n.epoch == p.epoch and not n.draining:
                return p
        return None

    def _pop_whole(self, worker: WorkerClass, k: int) -> Optional[Placement]:
        heap = self.free[worker]
        chosen = []
        while heap and len(chosen) < k:
            key, i = heapq.heappop(heap)
            if self.nodes[i].role is worker and not self.nodes[i].draining:
                chosen.append((key, i))
        if len(chosen) < k:
            for item in chosen:
                heapq.heappush(heap, item)
            return None
        ids = tuple(i for _, i in chosen)
        return Placement("+".join(f"n{i}" for i in ids), ids, whole=True)

    def allocate(self, req: TaskRequest) -> Optional[Placement]:
        """Place ``req`` on a free slot of its worker class; ``None`` means queued."""
        r = req.resource
        w = req.worker
        if r.whole_nodes:
            if w not in (WorkerClass.TrainerWorker, WorkerClass.OptimizerWorker):
                raise ValueError(f"{w.value} slots are not whole nodes")
            p = self._pop_whole(w, r.whole_nodes)
            if p is None:
                return None
            for i in p.nodes:
                n = self.nodes[i]
                if n.whole or n.cores_used or any(n.gpu_used):
                    raise AssertionError(f"node {i} is not idle")
                n.whole = True
                n.busy += 1
            return p
        if r.cpu_cores > self.spec.cpu_cores or r.gpu_fraction > 1.0:
            raise ValueError(f"request {req.id} exceeds a single node")
        expected = {
            WorkerClass.GeneratorWorker: 1.0,
            WorkerClass.ValidatorWorker: 0.5,
            WorkerClass.ScavengerWorker: 0.0,
        }.get(w)
        if expected is None or r.gpu_fraction != expected or r.cpu_cores != 1:
            raise ValueError(f"{w.value} cannot host {r}")
        p = self._pop_fractional(w)
        if p is None:
            return None
        n = self.nodes[p.nodes[0]]
        if n.whole:
            raise AssertionError(f"node {p.nodes[0]} is allocated whole")
        n.cores_used += p.cores
        if n.cores_used > self.spec.cpu_cores:
            raise AssertionError(f"node {p.nodes[0]} core overcommit")
        if p.gpu >= 0:
            n.gpu_used[p.gpu] += p.gpu_share
            if n.gpu_used[p.gpu] > 1.0 + 1e-12:
                raise AssertionError(f"gpu {p.gpu} of node {p.nodes[0]} overcommitted")
        n.busy += 1
        return p

    def release(self, p: Placement) -> list[int]:
        """Free a placement; returns ids of draining nodes that became idle."""
        drained = []
        if p.whole:
            for i in p.nodes:
                n = self.nodes[i]
                n.whole = False
                n.busy -= 1
                heapq.heappush(self.free[n.role], ((i, 0, 0), i))
            return drained
        i = p.nodes[0]
        n = self.nodes[i]
        n.cores_used -= p.cores
        if p.gpu >= 0:
            n.gpu_used[p.gpu] -= p.gpu_share
            if abs(n.gpu_used[p.gpu]) < 1e-12:
                n.gpu_used[p.gpu] = 0.0
        n.busy -= 1
        if n.draining:
            if n.busy == 0:
                drained.append(i)
        elif n.epoch == p.epoch:
            self._push(WorkerClass.ScavengerWorker if p.gpu < 0 else n.role, p)
        return drained

    def begin_drain(self, role: WorkerClass) -> Optional[int]:
        candidates = [i for i, n in enumerate(self.nodes) if n.role is role and not n.draining]
        if not candidates:
            return None
        i = candidates[-1]
        self.nodes[i].draining = True
        return i

    def convert(self, i: int, role: WorkerClass) -> None:
        n = self.nodes[i]
        if n.busy:
            raise AssertionError(f"node {i} still busy")
        n.role = role
        n.draining = False
        n.epoch += 1
        self._add_slots(i)


# simulation -----------------------------------------------------------------------


class Kernel:
    def __init__(self):
        self.time = 0.0
        self._queue: list = []
        self._seq = 0

    def at(self, t: float, fn, *args) -> None:
        if t < self.time:
            raise ValueError("cannot schedule into the past")
        self._seq += 1
        heapq.heappush(self._queue, (t, self._seq, fn, args))

    def run(self, horizon: float) -> None:
        q = self._queue
        pop = heapq.heappop
        while q and q[0][0] <= horizon:
            t, _, fn, args = pop(q)
            self.time = t
            fn(*args)
        self.time = max(self.time, horizon)

    @property
    def pending(self) -> int:
        return len(self._queue)


class SimCluster:
    """Simulated backend driving a :class:`SteeringEngine`."""

    def __init__(
        self,
        engine: SteeringEngine,
        models: Optional[Mapping[StageKind, StageModel]] = None,
        fabric: DataFabricModel = DataFabricModel(),
        seed: int = 0,
        synthesize_cells: bool = True,
        node: NodeSpec = NodeSpec(),
    ):
        self.engine = engine
        self.models = dict(models or default_stage_models())
        self.fabric = fabric
        self.seed = seed
        self.kernel = Kernel()
        self.cluster = Cluster(engine.partition, node)
        self.recorder = Recorder()
        self.log: Optional[EventLog] = None
        self.ctx = TaskContext(self.models, engine.quality, synthesize_cells)
        self._rngs: dict[str, random.Random] = {}
        self._drains: dict[int, tuple[WorkerClass, WorkerClass]] = {}
        engine.attach(self, self.recorder)

    # backend interface

    def now(self) -> float:
        return self.kernel.time

    def call_later(self, delay: float, fn: Callable[[], None]) -> None:
        self.kernel.at(self.kernel.time + delay, fn)

    def _rng(self, stage: StageKind, label: str) -> random.Random:
        key = f"{stage._value_}:{label}"
        r = self._rngs.get(key)
        if r is None:
            r = self._rngs[key] = rng_stream(self.seed, key)
        return r

    def submit(self, req: TaskRequest) -> None:
        t = self.kernel.time
        p = self.cluster.allocate(req)
        if p is None:
            raise RuntimeError(f"no free {req.worker.value} slot for task {req.id}")
        rng = self._rng(req.stage, p.label)
        n_in, n_out = payload_sizes(req.stage, rng, self.models)
        f = self.fabric
        start = t + f.control_latency + n_in / f.bandwidth
        ex = execute(req, rng, self.ctx, start)
        done = start + ex.duration
        # the whole timeline is known now; the recorder sorts rows at the end
        rec = self.recorder
        rec.submitted(t, req, n_in)
        rec.started(start, req, p.label)
        rec.completed(done, req, p.label, ex.outcome, n_out, ex.metric)
        result = TaskResult(req.id, start, done, n_out, ex.outcome, ex.value, p.label)
        self.kernel.at(done + f.control_latency, self._notify, result, p)
        self.kernel.at(done + f.control_latency + n_out / f.bandwidth + f.payload_processing_latency,
                       self._payload, req, result)

    def _notify(self, result: TaskResult, p: Placement) -> None:
        for i in self.cluster.release(p):
            self.kernel.at(self.kernel.time, self._finish_drain, i)
        self.engine.on_task_result(result)

    def _payload(self, req: TaskRequest, result: TaskResult) -> None:
        self.recorder.payload_ready(self.kernel.time, req, result.output_bytes)
        self.engine.on_payload_ready(result)

    # reallocation

    def reassign(self, from_role: WorkerClass, to_role: WorkerClass) -> bool:
        i = self.cluster.begin_drain(from_role)
        if i is None:
            return False
        self._drains[i] = (from_role, to_role)
        if self.cluster.nodes[i].busy == 0:
            self.kernel.at(self.kernel.time, self._finish_drain, i)
        return True

    def _finish_drain(self, i: int) -> None:
        src, dst = self._drains.pop(i)
        self.cluster.convert(i, dst)
        # the census goes first: the engine refills the new slots straight away
        delta = self.engine.partition_delta(src, dst)
        moved = {src: -1, dst: 1}
        self._log_census(delta, moved)
        self.engine.on_partition_changed(src, dst)

    def _log_census(self, delta=None, moved=None) -> None:
        e = self.engine
        delta, moved = delta or {}, moved or {}
        for cls in WorkerClass:
            self.recorder.partition(self.kernel.time, cls, e.capacity[cls] + delta.get(cls, 0),
                                    e.nodes[cls] + moved.get(cls, 0))

    def run(self, horizon: float) -> EventLog:
        if horizon < 0:
            raise ValueError("horizon must be non-negative")
        with _collector_paused():
            self._log_census()
            self.engine.start()
            self.kernel.run(horizon)
            self.log = self.recorder.finish(horizon)
        return self.log


@contextlib.contextmanager
def _collector_paused():
    # a run allocates millions of acyclic tuples; cyclic GC passes over them
    # dominate large runs without ever freeing anything
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def run(engine: SteeringEngine, horizon: float, seed: int = 0, **kwargs) -> EventLog:
    """Simulate ``engine`` on its partition for ``horizon`` seconds."""
    return SimCluster(engine, seed=seed, **kwargs).run(horizon)

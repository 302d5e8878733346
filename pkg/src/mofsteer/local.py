"""Real concurrent backend: stub tasks as timed waits on worker threads.

Wall-clock time is rescaled to virtual seconds (``virtual = wall / time_scale``)
so the resulting log has the same schema and units as a simulated one. Only
the main thread touches the steering engine and the recorder; workers report
through a single ordered channel.
"""

from __future__ import annotations

import heapq
import os
import queue
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

from .domain import NodeSpec, StageKind, TaskRequest, TaskResult, WorkerClass
from .engine import SteeringEngine
from .simcluster import Cluster, DataFabricModel, Placement, payload_sizes, rng_stream
from .stages import StageModel, default_stage_models
from .tasks import Execution, TaskContext, execute
from .telemetry import EventLog, Recorder


class OversubscriptionError(ValueError):
    """More worker threads than the host is allowed to carry."""


@dataclass(frozen=True)
class LocalRuntimeConfig:
    virtual_nodes: int
    time_scale: float = 1e-3
    # at most this many tasks of a class run at once; default is the class's slot count
    worker_caps: Mapping[WorkerClass, int] = field(default_factory=dict)
    # worker threads allowed per hardware thread (workers mostly sleep)
    oversubscription_cap: int = 128

    def __post_init__(self):
        if self.virtual_nodes < 1:
            raise ValueError("virtual_nodes must be at least 1")
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")
        if self.oversubscription_cap < 1:
            raise ValueError("oversubscription_cap must be at least 1")
        for cls, cap in self.worker_caps.items():
            if not isinstance(cls, WorkerClass):
                raise ValueError(f"unknown worker class {cls!r}")
            if cap < 1:
                raise ValueError(f"worker cap for {cls.value} must be at least 1")


def hardware_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


class LocalRuntime:
    """Backend that really waits: each running task holds a thread for its duration."""

    def __init__(
        self,
        engine: SteeringEngine,
        config: LocalRuntimeConfig,
        models: Optional[Mapping[StageKind, StageModel]] = None,
        fabric: DataFabricModel = DataFabricModel(),
        seed: int = 0,
        synthesize_cells: bool = True,
        node: NodeSpec = NodeSpec(),
    ):
        if engine.partition.total_nodes != config.virtual_nodes:
            raise ValueError(
                f"partition has {engine.partition.total_nodes} nodes, config asks for {config.virtual_nodes}"
            )
        self.engine = engine
        self.config = config
        self.models = dict(models or default_stage_models())
        self.fabric = fabric
        self.seed = seed
        self.cluster = Cluster(engine.partition, node)
        self.recorder = Recorder()
        self.ctx = TaskContext(self.models, engine.quality, synthesize_cells)
        self.log: Optional[EventLog] = None
        self.threads = self._thread_budget()

        self._rngs: dict[str, random.Random] = {}
        self._timers: list = []
        self._timer_seq = 0
        self._channel: "queue.Queue" = queue.Queue()
        self._stop = threading.Event()
        self._pools: dict[WorkerClass, ThreadPoolExecutor] = {}
        self._drains: dict[int, tuple[WorkerClass, WorkerClass]] = {}
        self._t0 = time.monotonic()
        engine.attach(self, self.recorder)

    # sizing

    def _caps(self) -> dict[WorkerClass, int]:
        caps = {}
        for cls in WorkerClass:
            slots = self.engine.capacity[cls]
            if slots:
                caps[cls] = min(slots, self.config.worker_caps.get(cls, slots))
        return caps

    def _thread_budget(self) -> int:
        needed = sum(self._caps().values())
        allowed = hardware_threads() * self.config.oversubscription_cap
        if needed > allowed:
            raise OversubscriptionError(
                f"{needed} worker threads exceed {allowed} "
                f"({hardware_threads()} hardware threads x {self.config.oversubscription_cap})"
            )
        return needed

    # clock

    def now(self) -> float:
        return (time.monotonic() - self._t0) / self.config.time_scale

    def _wall(self, virtual: float) -> float:
        return self._t0 + virtual * self.config.time_scale

    def _wait_until(self, virtual: float) -> bool:
        """Sleep until virtual time ``virtual``; False if the run was stopped."""
        deadline = self._wall(virtual)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return True
            if self._stop.wait(remaining):
                return False

    # backend interface

    def call_later(self, delay: float, fn: Callable[[], None], *args) -> None:
        self._at(self.now() + delay, fn, *args)

    def _at(self, virtual: float, fn, *args) -> None:
        self._timer_seq += 1
        heapq.heappush(self._timers, (virtual, self._timer_seq, fn, args))

    def _rng(self, stage: StageKind, label: str) -> random.Random:
        key = f"{stage._value_}:{label}"
        r = self._rngs.get(key)
        if r is None:
            r = self._rngs[key] = rng_stream(self.seed, key)
        return r

    def submit(self, req: TaskRequest) -> None:
        t = self.now()
        p = self.cluster.allocate(req)
        if p is None:
            raise RuntimeError(f"no free {req.worker.value} slot for task {req.id}")
        # a slot's stream is only ever used by the one task holding the slot
        rng = self._rng(req.stage, p.label)
        n_in, n_out = payload_sizes(req.stage, rng, self.models)
        self.recorder.submitted(t, req, n_in)
        ready = t + self.fabric.control_latency + n_in / self.fabric.bandwidth
        self._pools[req.worker].submit(self._work, req, p, rng, ready, n_out)

    def reassign(self, from_role: WorkerClass, to_role: WorkerClass) -> bool:
        i = self.cluster.begin_drain(from_role)
        if i is None:
            return False
        self._drains[i] = (from_role, to_role)
        if self.cluster.nodes[i].busy == 0:
            self.call_later(0.0, self._finish_drain, i)
        return True

    # worker side

    def _work(self, req: TaskRequest, p: Placement, rng, ready: float, n_out: int) -> None:
        try:
            if not self._wait_until(ready):
                return
            start = self.now()
            ex = execute(req, rng, self.ctx, start)
            if not self._wait_until(start + ex.duration):
                return
            self._channel.put((req, p, start, self.now(), ex, n_out))
        except BaseException as exc:  # surfaced on the main thread
            self._channel.put(exc)

    # main-thread side

    def _on_done(self, req: TaskRequest, p: Placement, start: float, done: float, ex: Execution, n_out: int):
        rec = self.recorder
        rec.started(start, req, p.label)
        rec.completed(done, req, p.label, ex.outcome, n_out, ex.metric)
        result = TaskResult(req.id, start, done, n_out, ex.outcome, ex.value, p.label)
        f = self.fabric
        self._at(done + f.control_latency, self._notify, result, p)
        self._at(done + f.control_latency + n_out / f.bandwidth + f.payload_processing_latency,
                 self._payload, req, result)

    def _notify(self, result: TaskResult, p: Placement) -> None:
        for i in self.cluster.release(p):
            self.call_later(0.0, self._finish_drain, i)
        self.engine.on_task_result(result)

    def _payload(self, req: TaskRequest, result: TaskResult) -> None:
        self.recorder.payload_ready(self.now(), req, result.output_bytes)
        self.engine.on_payload_ready(result)

    def _finish_drain(self, i: int) -> None:
        src, dst = self._drains.pop(i)
        self.cluster.convert(i, dst)
        # record the new census before the engine fills the converted node
        self._log_census(self.engine.partition_delta(src, dst), {src: -1, dst: 1})
        self.engine.on_partition_changed(src, dst)

    def _log_census(self, delta=None, moved=None) -> None:
        e = self.engine
        t = self.now()
        delta, moved = delta or {}, moved or {}
        for cls in WorkerClass:
            self.recorder.partition(t, cls, e.capacity[cls] + delta.get(cls, 0), e.nodes[cls] + moved.get(cls, 0))

    def run(self, wall_horizon: float) -> EventLog:
        """Run for ``wall_horizon`` wall seconds; the log covers the matching virtual span."""
        if wall_horizon < 0:
            raise ValueError("wall_horizon must be non-negative")
        horizon = wall_horizon / self.config.time_scale
        # one pool per class, so tasks beyond one class's cap queue without
        # holding threads another class needs
        self._pools = {
            cls: ThreadPoolExecutor(max_workers=n, thread_name_prefix=cls.value)
            for cls, n in self._caps().items()
        }
        try:
            self._t0 = time.monotonic()
            self._log_census()
            self.engine.start()
            self._loop(horizon)
        finally:
            self._stop.set()
            for pool in self._pools.values():
                pool.shutdown(wait=True, cancel_futures=True)
        self.log = self.recorder.finish(horizon)
        return self.log

    def _loop(self, horizon: float) -> None:
        end = self._wall(horizon)
        timers = self._timers
        channel = self._channel
        while True:
            wall = time.monotonic()
            if wall >= end:
                return
            while timers and self._wall(timers[0][0]) <= wall:
                _, _, fn, args = heapq.heappop(timers)
                fn(*args)
            wake = min(self._wall(timers[0][0]), end) if timers else end
            try:
                msg = channel.get(timeout=max(0.0, wake - time.monotonic()))
            except queue.Empty:
                continue
            if isinstance(msg, BaseException):
                raise msg
            self._on_done(*msg)


def run_local(
    config: LocalRuntimeConfig,
    engine: SteeringEngine,
    wall_horizon: float,
    seed: int = 0,
    **kwargs,
) -> EventLog:
    """Execute ``engine`` against real timed waits for ``wall_horizon`` seconds."""
    return LocalRuntime(engine, config, seed=seed, **kwargs).run(wall_horizon)

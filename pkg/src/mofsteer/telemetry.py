"""Append-only event log, its on-disk format, and the metrics computed from it.

Every metric is a pure function of the log. Times carry microsecond
precision and all floats are written with their shortest round-tripping
repr, so a log reloaded from disk yields exactly the same numbers as the
in-memory one.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

from .domain import StageKind, WorkerClass
from .stages import STRICT_STRAIN

TIME_DECIMALS = 6

class EventKind(str, enum.Enum):
    TaskSubmitted = "TaskSubmitted"
    TaskStarted = "TaskStarted"
    TaskCompleted = "TaskCompleted"
    PayloadReady = "PayloadReady"
    QueuePush = "QueuePush"
    QueuePop = "QueuePop"
    RetrainStarted = "RetrainStarted"
    RetrainFinished = "RetrainFinished"
    ModelFirstUsed = "ModelFirstUsed"
    PartitionChanged = "PartitionChanged"


class LogEntry(NamedTuple):
    seq: int
    time: float
    kind: str
    stage: Optional[str] = None
    task: Optional[int] = None
    entity: Optional[int] = None
    ref: Optional[int] = None
    slot: Optional[str] = None
    worker: Optional[str] = None
    bytes: Optional[int] = None
    outcome: Optional[str] = None
    value: Optional[float] = None
    count: Optional[int] = None
    version: Optional[int] = None
    step: Optional[str] = None
    queue: Optional[str] = None


FIELDS = LogEntry._fields


class EventLog:
    """Ordered, append-only list of :class:`LogEntry`."""

    def __init__(self, entries: Iterable[LogEntry] = ()):
        self._entries: list[LogEntry] = list(entries)

    def append(self, time: float, kind: Union[EventKind, str], **fields) -> LogEntry:
        kind = kind.value if isinstance(kind, EventKind) else EventKind(kind).value
        t = float(np.round(float(time), TIME_DECIMALS))
        if self._entries and t < self._entries[-1].time:
            raise ValueError(f"log time went backwards: {t} < {self._entries[-1].time}")
        entry = LogEntry(len(self._entries), t, kind, **fields)
        self._entries.append(entry)
        return entry

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[LogEntry]:
        return iter(self._entries)

    def __getitem__(self, i):
        return self._entries[i]

    @property
    def entries(self) -> list[LogEntry]:
        return self._entries

    @property
    def end_time(self) -> float:
        return self._entries[-1].time if self._entries else 0.0

    def of_kind(self, kind: Union[EventKind, str]) -> list[LogEntry]:
        kind = EventKind(kind).value
        return [e for e in self._entries if e.kind == kind]

    # persistence ---------------------------------------------------------

    def to_jsonl(self) -> str:
        return "".join(entry_to_json(e) + "\n" for e in self._entries)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for e in self._entries:
                fh.write(entry_to_json(e))
                fh.write("\n")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "EventLog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "EventLog":
        entries = []
        for line in lines:
            line = line.strip()
            if line:
                entries.append(LogEntry(**json.loads(line)))
        return cls(entries)


def entry_to_json(e: LogEntry) -> str:
    return json.dumps({k: v for k, v in zip(FIELDS, e) if v is not None}, separators=(",", ":"))


class Recorder:
    """Collects task-lifecycle rows for one run and turns them into a log.

    Backends may record an entry ahead of time (a simulated task's start and
    completion are known at submission), so rows are buffered and put in
    time order by :meth:`finish`, with ties kept in recording order. The
    first generation task to run each new model version gets a
    ``ModelFirstUsed`` entry at that point.
    """

    def __init__(self):
        self.rows: list[tuple] = []

    def _row(self, t, kind, stage=None, task=None, entity=None, ref=None, slot=None, worker=None,
             nbytes=None, outcome=None, value=None, count=None, version=None, step=None, queue=None):
        self.rows.append((t, kind, stage, task, entity, ref, slot, worker,
                          nbytes, outcome, value, count, version, step, queue))

    # The three task rows below are built as literal tuples: they make up
    # nearly every row of a run.

    def submitted(self, t, req, input_bytes=None):
        ids = req.payload_ids
        self.rows.append((
            t, "TaskSubmitted", req.stage._value_, req.id, ids[0] if ids else None, req.ref, None,
            req.worker._value_, req.input_bytes if input_bytes is None else input_bytes,
            None, None, None, None, req.step, None,
        ))

    def started(self, t, req, slot):
        stage = req.stage
        ids = req.payload_ids
        version = req.payload[0].version if stage is StageKind.GenerateLinkers else None
        self.rows.append((
            t, "TaskStarted", stage._value_, req.id, ids[0] if ids else None, None, slot,
            req.worker._value_, None, None, None, None, version, req.step, None,
        ))
        if stage is StageKind.Retrain:
            training_set, target = req.payload
            self._row(t, "RetrainStarted", task=req.id, count=training_set.size, version=target)

    def completed(self, t, req, slot, outcome, output_bytes, metric=None):
        value = metric if type(metric) is float else None
        count = metric if type(metric) is int else None
        ids = req.payload_ids
        self.rows.append((
            t, "TaskCompleted", req.stage._value_, req.id, ids[0] if ids else None, None, slot,
            req.worker._value_, output_bytes, outcome._value_, value, count, None, req.step, None,
        ))
        if req.stage is StageKind.Retrain:
            training_set, target = req.payload
            self._row(t, "RetrainFinished", task=req.id, count=training_set.size, version=target)

    def payload_ready(self, t, req, output_bytes):
        ids = req.payload_ids
        self.rows.append((
            t, "PayloadReady", req.stage._value_, req.id, ids[0] if ids else None, req.ref, None,
            None, output_bytes, None, None, None, None, req.step, None,
        ))

    def queue_push(self, t, queue, entity, value=None):
        self.rows.append((t, "QueuePush", None, None, entity, None, None, None,
                          None, None, value, None, None, None, queue))

    def queue_pop(self, t, queue, entity, task, value=None):
        self.rows.append((t, "QueuePop", None, task, entity, None, None, None,
                          None, None, value, None, None, None, queue))

    def partition(self, t, worker: WorkerClass, slots: int, nodes: int):
        self._row(t, "PartitionChanged", worker=worker._value_, value=slots, count=nodes)

    def finish(self, horizon: Optional[float] = None) -> EventLog:
        """Sorted, numbered log of every row at or before ``horizon``."""
        rows = self.rows
        rows.sort(key=_time_of)  # stable: equal times keep recording order
        # rounding is monotone, so the order survives it
        times = np.round(np.fromiter((r[0] for r in rows), float, len(rows)), TIME_DECIMALS).tolist()
        cut = len(rows)
        if horizon is not None:
            h = float(np.round(horizon, TIME_DECIMALS))
            while cut and times[cut - 1] > h:
                cut -= 1
        entries = []
        add = entries.append
        make = tuple.__new__
        latest = 0
        gen = StageKind.GenerateLinkers.value
        for i in range(cut):
            row = rows[i]
            t = times[i]
            add(make(LogEntry, (len(entries), t) + row[1:]))
            if row[1] == "TaskStarted" and row[2] == gen and row[12] > latest:
                latest = row[12]
                add(LogEntry(len(entries), t, "ModelFirstUsed", task=row[3], version=latest))
        return EventLog(entries)


def _time_of(row):
    return row[0]


# metrics ------------------------------------------------------------------


class UndefinedRate(ValueError):
    pass


def _entries(log) -> list[LogEntry]:
    return log.entries if isinstance(log, EventLog) else list(log)


def slot_census(log) -> dict[str, list[tuple[float, int, int]]]:
    """Per worker class, the ``(time, slots, nodes)`` history from partition entries.

    Partition entries carry the slot count in ``value`` and the number of
    nodes dedicated to the class in ``count``. Scavenger cores live on
    validator nodes, so that class reports zero dedicated nodes.
    """
    out: dict[str, list[tuple[float, int, int]]] = defaultdict(list)
    for e in _entries(log):
        if e.kind == "PartitionChanged":
            out[e.worker].append((e.time, int(e.value), e.count))
    return out


def node_count(log) -> int:
    census = slot_census(log)
    return sum(history[0][2] for history in census.values() if history)


def _slot_seconds(history, start, end) -> float:
    total = 0.0
    for i, (t, slots, _) in enumerate(history):
        t_next = history[i + 1][0] if i + 1 < len(history) else math.inf
        lo, hi = max(t, start), min(t_next, end)
        if hi > lo:
            total += slots * (hi - lo)
    return total


def busy_fraction(log, worker: Union[WorkerClass, str], window: Optional[tuple[float, float]] = None) -> float:
    """Busy slot-seconds over available slot-seconds for one worker class."""
    try:
        name = WorkerClass(worker).value
    except ValueError:
        raise ValueError(f"unknown worker class {worker!r}") from None
    entries = _entries(log)
    log_end = entries[-1].time if entries else 0.0
    start, end = window if window is not None else (0.0, log_end)
    if end <= start:
        raise ValueError("empty window")
    history = slot_census(entries).get(name)
    if not history:
        raise ValueError(f"worker class {name} has no slots in this log")
    capacity = _slot_seconds(history, start, end)
    if capacity == 0:
        return 0.0
    running: dict[int, float] = {}
    busy = 0.0
    for e in entries:
        if e.worker != name:
            continue
        if e.kind == "TaskStarted":
            running[e.task] = e.time
        elif e.kind == "TaskCompleted":
            t0 = running.pop(e.task, None)
            if t0 is not None:
                busy += max(0.0, min(e.time, end) - max(t0, start))
    for t0 in running.values():
        busy += max(0.0, end - max(t0, start))
    return min(busy / capacity, 1.0)


def completion_times(log, stage: Union[StageKind, str], window=None) -> list[float]:
    name = StageKind(stage).value
    lo, hi = window if window is not None else (-math.inf, math.inf)
    last_step = "adsorption" if name == StageKind.EstimateAdsorption.value else None
    return [
        e.time for e in _entries(log)
        if e.kind == "TaskCompleted" and e.stage == name and e.step in (None, last_step)
        and lo <= e.time <= hi
    ]


def rate_from_times(times: Sequence[float]) -> float:
    """Least-squares slope of the cumulative count against time, per hour.

    Completions sharing a timestamp are collapsed into one point carrying
    the cumulative count after all of them.
    """
    if len(times) < 2:
        raise UndefinedRate(f"need at least 2 completions, got {len(times)}")
    ts = np.sort(np.asarray(times, dtype=float))
    distinct, last_index = np.unique(ts[::-1], return_index=True)
    counts = len(ts) - last_index
    if len(distinct) < 2:
        raise UndefinedRate("all completions share one timestamp")
    x = distinct / 3600.0
    xm = x.mean()
    spread = float(np.dot(x - xm, x - xm))
    if spread == 0.0:
        raise UndefinedRate("completion times too close to fit a slope")
    slope = float(np.dot(x - xm, counts - counts.mean()) / spread)
    return max(slope, 0.0)


def sustained_throughput(log, stage: Union[StageKind, str], window=None) -> float:
    """Tasks of ``stage`` completed per hour (least-squares slope)."""
    return rate_from_times(completion_times(log, stage, window))


# the four workflow stages of a scaling study; the last pools both
# downstream steps of a stable MOF
STAGE_GROUPS: dict[str, tuple[StageKind, ...]] = {
    "generate": (StageKind.GenerateLinkers,),
    "assemble": (StageKind.AssembleMofs,),
    "validate": (StageKind.ValidateStructure,),
    "optimize+estimate": (StageKind.OptimizeCells, StageKind.EstimateAdsorption),
}


def group_throughput(log, group: str, window=None) -> float:
    """Pooled completions per hour of the stages in ``STAGE_GROUPS[group]``."""
    try:
        stages = STAGE_GROUPS[group]
    except KeyError:
        raise ValueError(f"unknown stage group {group!r}; expected one of {sorted(STAGE_GROUPS)}") from None
    times = [t for stage in stages for t in completion_times(log, stage, window)]
    return rate_from_times(times)


@dataclass(frozen=True)
class LatencyStat:
    mean: float
    q1: float
    q3: float
    n: int

    @classmethod
    def of(cls, samples: Sequence[float]) -> "LatencyStat":
        a = np.asarray(samples, dtype=float)
        q1, q3 = np.percentile(a, [25, 75])
        return cls(float(a.mean()), float(q1), float(q3), len(a))


LATENCY_NAMES = (
    "process_linkers",
    "validate_structures",
    "retrain",
    "compute_charges",
    "estimate_adsorption",
)


def latency_samples(log) -> dict[str, list[float]]:
    gen_done: dict[int, float] = {}
    validate_done: dict[int, float] = {}
    optimize_done: dict[int, float] = {}
    charges_done: dict[int, float] = {}
    retrain_done: dict[int, float] = {}
    out = {name: [] for name in LATENCY_NAMES}
    G, P, V, O, E = (s.value for s in (
        StageKind.GenerateLinkers, StageKind.ProcessLinkers, StageKind.ValidateStructure,
        StageKind.OptimizeCells, StageKind.EstimateAdsorption,
    ))
    for e in _entries(log):
        k = e.kind
        if k == "TaskCompleted":
            if e.stage == G:
                gen_done[e.task] = e.time
            elif e.stage == V:
                validate_done[e.task] = e.time
            elif e.stage == O:
                optimize_done[e.entity] = e.time
            elif e.stage == E and e.step == "charges":
                charges_done[e.entity] = e.time
        elif k == "PayloadReady":
            if e.stage == P and e.ref in gen_done:
                out["process_linkers"].append(e.time - gen_done.pop(e.ref))
            elif e.stage == V and e.task in validate_done:
                out["validate_structures"].append(e.time - validate_done.pop(e.task))
        elif k == "TaskStarted" and e.stage == E:
            if e.step == "charges" and e.entity in optimize_done:
                out["compute_charges"].append(e.time - optimize_done.pop(e.entity))
            elif e.step == "adsorption" and e.entity in charges_done:
                out["estimate_adsorption"].append(e.time - charges_done.pop(e.entity))
        elif k == "RetrainFinished":
            retrain_done[e.version] = e.time
        elif k == "ModelFirstUsed" and e.version in retrain_done:
            out["retrain"].append(e.time - retrain_done.pop(e.version))
    return out


def latency_metrics(log) -> dict[str, Optional[LatencyStat]]:
    """Mean and inter-quartile range per named latency; ``None`` when absent."""
    return {name: (LatencyStat.of(s) if s else None) for name, s in latency_samples(log).items()}


@dataclass(frozen=True)
class DiscoveryCurve:
    times: tuple[float, ...]
    counts: tuple[int, ...]
    threshold: float
    nodes: int
    horizon: float

    @property
    def total(self) -> int:
        return self.counts[-1] if self.counts else 0

    @property
    def per_node_hour(self) -> float:
        if self.nodes == 0 or self.horizon <= 0:
            return 0.0
        return self.total / (self.nodes * self.horizon / 3600.0)

    def count_at(self, t: float) -> int:
        i = int(np.searchsorted(np.asarray(self.times), t, side="right"))
        return self.counts[i - 1] if i else 0


def stability_results(log) -> list[tuple[float, float]]:
    """``(time, strain)`` for every completed stability computation."""
    V = StageKind.ValidateStructure.value
    return [
        (e.time, e.value) for e in _entries(log)
        if e.kind == "TaskCompleted" and e.stage == V and e.value is not None
    ]


def discovery_curve(log, threshold: float = STRICT_STRAIN, horizon: Optional[float] = None) -> DiscoveryCurve:
    """Cumulative count of MOFs found with strain below ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    entries = _entries(log)
    times, counts = [], []
    n = 0
    for t, strain in stability_results(entries):
        if horizon is not None and t > horizon:
            break
        if strain < threshold:
            n += 1
            times.append(t)
            counts.append(n)
    end = horizon if horizon is not None else (entries[-1].time if entries else 0.0)
    return DiscoveryCurve(tuple(times), tuple(counts), threshold, node_count(entries), end)


def stable_fraction(log, threshold: float = STRICT_STRAIN, horizon: Optional[float] = None) -> float:
    """Share of stability results below ``threshold``."""
    results = [s for t, s in stability_results(log) if horizon is None or t <= horizon]
    if not results:
        return 0.0
    return sum(1 for s in results if s < threshold) / len(results)


def completed_counts(log, until: Optional[float] = None) -> dict[str, int]:
    counts: dict[str, int] = defaultdict(int)
    for e in _entries(log):
        if until is not None and e.time > until:
            break
        if e.kind == "TaskCompleted":
            key = e.stage if e.step is None or e.stage != StageKind.EstimateAdsorption.value else f"{e.stage}:{e.step}"
            counts[key] += 1
    return dict(counts)


# reports ------------------------------------------------------------------

THROUGHPUT_STAGES = (
    StageKind.GenerateLinkers,
    StageKind.ProcessLinkers,
    StageKind.AssembleMofs,
    StageKind.ValidateStructure,
    StageKind.OptimizeCells,
    StageKind.EstimateAdsorption,
    StageKind.Retrain,
)


def throughput_table(log, window=None) -> dict[str, Optional[float]]:
    out = {}
    for stage in THROUGHPUT_STAGES:
        try:
            out[stage.value] = sustained_throughput(log, stage, window)
        except UndefinedRate:
            out[stage.value] = None
    return out


def write_reports(log, out_dir: Union[str, Path], horizon: Optional[float] = None) -> dict[str, Path]:
    """Write throughput, latency, utilization and discovery CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["throughput"] = out_dir / "throughput.csv"
    with open(paths["throughput"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "completed", "per_hour"])
        counts = completed_counts(log)
        for stage, rate in throughput_table(log).items():
            done = counts.get(stage, 0) if stage != StageKind.EstimateAdsorption.value else counts.get(f"{stage}:adsorption", 0)
            w.writerow([stage, done, "" if rate is None else f"{rate:.6f}"])

    paths["latency"] = out_dir / "latency.csv"
    with open(paths["latency"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "n", "mean", "q1", "q3"])
        for name, stat in latency_metrics(log).items():
            if stat is None:
                w.writerow([name, 0, "", "", ""])
            else:
                w.writerow([name, stat.n, f"{stat.mean:.6f}", f"{stat.q1:.6f}", f"{stat.q3:.6f}"])

    paths["utilization"] = out_dir / "utilization.csv"
    with open(paths["utilization"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["worker", "slots", "busy_fraction"])
        census = slot_census(log)
        for worker in WorkerClass:
            history = census.get(worker.value)
            if not history or history[-1][1] == 0:
                w.writerow([worker.value, 0, ""])
                continue
            w.writerow([worker.value, history[-1][1], f"{busy_fraction(log, worker):.6f}"])

    curve = discovery_curve(log, horizon=horizon)
    paths["discovery"] = out_dir / "discovery.csv"
    with open(paths["discovery"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "stable_mofs"])
        for t, c in zip(curve.times, curve.counts):
            w.writerow([f"{t:.6f}", c])

    paths["summary"] = out_dir / "summary.json"
    summary = {
        "nodes": curve.nodes,
        "horizon": curve.horizon,
        "stable_mofs": curve.total,
        "stable_per_node_hour": curve.per_node_hour,
        "stable_fraction": stable_fraction(log, horizon=horizon),
        "log_entries": len(_entries(log)),
    }
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n")
    return paths

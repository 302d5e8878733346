"""Policy and resource checks rebuilt from an event log alone.

Nothing here looks at engine state; each check replays the log and reports
the entries that break a rule, so an empty list means the rule held.
"""

import re
from collections import defaultdict

TRAINING_STRAIN = 0.25
RETRAIN_THRESHOLD = 64
VALIDATE = "ValidateStructure"
OPTIMIZE = "OptimizeCells"
RETRAIN = "Retrain"


def lifo_violations(log):
    """Each validation takes the most recently pushed MOF still waiting."""
    pending = {}  # entity -> push order
    order = 0
    bad = []
    for e in log:
        if e.kind == "QueuePush" and e.queue == "assembled":
            order += 1
            pending[e.entity] = order
        elif e.kind == "TaskSubmitted" and e.stage == VALIDATE:
            if not pending:
                bad.append((e, "validation submitted with nothing pending"))
                continue
            newest = max(pending, key=pending.get)
            if e.entity != newest:
                bad.append((e, f"took {e.entity}, newest pending was {newest}"))
            pending.pop(e.entity, None)
    return bad


def priority_violations(log):
    """Each optimization takes a MOF whose strain is minimal among those waiting."""
    pending = {}
    bad = []
    for e in log:
        if e.kind == "QueuePush" and e.queue == "stable":
            pending[e.entity] = e.value
        elif e.kind == "TaskSubmitted" and e.stage == OPTIMIZE:
            if e.entity not in pending:
                bad.append((e, "optimized MOF was never queued"))
                continue
            strain = pending.pop(e.entity)
            if pending and strain > min(pending.values()):
                bad.append((e, f"strain {strain} while {min(pending.values())} was waiting"))
    return bad


def _qualifying_strains(log):
    return {e.task: e.value for e in log
            if e.kind == "TaskCompleted" and e.stage == VALIDATE and e.value is not None}


def retrain_gate_violations(log, threshold=RETRAIN_THRESHOLD):
    """Retraining starts only once enough qualifying MOFs exist, and only after growth."""
    strains = _qualifying_strains(log)
    completed = known = 0
    at_last_submit = None
    nth_completion_time = None
    bad = []
    for e in log:
        if e.kind == "TaskCompleted" and e.stage == VALIDATE and e.value is not None and e.value < TRAINING_STRAIN:
            completed += 1
            if completed == threshold:
                nth_completion_time = e.time
        elif e.kind == "PayloadReady" and e.stage == VALIDATE:
            s = strains.get(e.task)
            if s is not None and s < TRAINING_STRAIN:
                known += 1
        elif e.kind == "TaskSubmitted" and e.stage == RETRAIN:
            if known < threshold:
                bad.append((e, f"retrain submitted with {known} qualifying MOFs known"))
            if at_last_submit is not None and known <= at_last_submit:
                bad.append((e, f"retrain submitted without growth ({known} <= {at_last_submit})"))
            at_last_submit = known
        elif e.kind == "RetrainStarted":
            if nth_completion_time is None or e.time < nth_completion_time:
                bad.append((e, f"retrain started before the {threshold}th qualifying MOF"))
    return bad


def single_flight_violations(log):
    """Retrain intervals never overlap, and a new one waits for the last payload."""
    bad = []
    running = None
    for e in log:
        if e.kind == "RetrainStarted":
            if running is not None:
                bad.append((e, f"retrain {e.task} started while {running} was running"))
            running = e.task
        elif e.kind == "RetrainFinished":
            if running != e.task:
                bad.append((e, f"retrain {e.task} finished but {running} was running"))
            running = None
    in_flight = None
    for e in log:
        if e.stage != RETRAIN:
            continue
        if e.kind == "TaskSubmitted":
            if in_flight is not None:
                bad.append((e, f"retrain {e.task} submitted before payload of {in_flight}"))
            in_flight = e.task
        elif e.kind == "PayloadReady" and e.task == in_flight:
            in_flight = None
    return bad


def _census(log):
    slots = {}
    for e in log:
        if e.kind == "PartitionChanged":
            slots[e.worker] = int(e.value)
    return slots


def overcommit_violations(log):
    """Submitted-but-unfinished tasks per class never exceed the class's slots."""
    slots = {}
    busy = defaultdict(int)
    bad = []
    for e in log:
        if e.kind == "PartitionChanged":
            slots[e.worker] = int(e.value)
            if busy[e.worker] > slots[e.worker] and e.worker not in ("GeneratorWorker", "ValidatorWorker",
                                                                       "ScavengerWorker"):
                bad.append((e, f"{e.worker} capacity dropped below running tasks"))
        elif e.kind == "TaskSubmitted":
            busy[e.worker] += 1
            if busy[e.worker] > slots.get(e.worker, 0):
                bad.append((e, f"{e.worker}: {busy[e.worker]} tasks on {slots.get(e.worker, 0)} slots"))
        elif e.kind == "TaskCompleted":
            busy[e.worker] -= 1
    return bad


_GEN = re.compile(r"^n(\d+)/g(\d+)$")
_VAL = re.compile(r"^n(\d+)/g(\d+)/c(\d+)$")
_SCAV = re.compile(r"^n(\d+)/c(\d+)$")
_WHOLE = re.compile(r"^n\d+(\+n\d+)*$")


def placement_violations(log, cores_per_node=32):
    """Replays slot labels: cores, GPU shares and whole nodes are never oversubscribed."""
    events = []
    for e in log:
        if e.kind == "TaskStarted":
            events.append((e.time, 1, e))
        elif e.kind == "TaskCompleted":
            events.append((e.time, 0, e))
    events.sort(key=lambda x: (x[0], x[1]))  # releases first at equal times
    cores = defaultdict(int)
    pinned = defaultdict(set)
    gpu = defaultdict(float)
    whole = set()
    labels = set()
    bad = []

    def parse(label):
        if m := _VAL.match(label):
            return "val", int(m[1]), int(m[2]), int(m[3])
        if m := _GEN.match(label):
            return "gen", int(m[1]), int(m[2]), None
        if m := _SCAV.match(label):
            return "scav", int(m[1]), None, int(m[2])
        if _WHOLE.match(label):
            return "whole", tuple(int(x[1:]) for x in label.split("+")), None, None
        raise ValueError(f"unrecognised slot label {label!r}")

    for t, starting, e in events:
        kind, node, g, core = parse(e.slot)
        sign = 1 if starting else -1
        if starting:
            if e.slot in labels:
                bad.append((e, f"slot {e.slot} already busy"))
            labels.add(e.slot)
        else:
            labels.discard(e.slot)
        if kind == "whole":
            for n in node:
                if starting:
                    if n in whole or cores[n] or any(gpu[(n, k)] for k in range(8)):
                        bad.append((e, f"node {n} taken whole while busy"))
                    whole.add(n)
                else:
                    whole.discard(n)
            continue
        if starting and node in whole:
            bad.append((e, f"node {node} is allocated whole"))
        cores[node] += sign
        if cores[node] > cores_per_node:
            bad.append((e, f"node {node} uses {cores[node]} cores"))
        if core is not None:
            if starting:
                if core in pinned[node]:
                    bad.append((e, f"core {core} of node {node} double-booked"))
                pinned[node].add(core)
            else:
                pinned[node].discard(core)
        if g is not None:
            gpu[(node, g)] += sign * (0.5 if kind == "val" else 1.0)
            if gpu[(node, g)] > 1.0 + 1e-9:
                bad.append((e, f"gpu {g} of node {node} at {gpu[(node, g)]}"))
    return bad


def all_violations(log, retrain_threshold=RETRAIN_THRESHOLD):
    checks = {
        "lifo": lifo_violations,
        "priority": priority_violations,
        "retrain_gate": lambda log_: retrain_gate_violations(log_, retrain_threshold),
        "single_flight": single_flight_violations,
        "overcommit": overcommit_violations,
        "placement": placement_violations,
    }
    return {name: fn(log) for name, fn in checks.items()}

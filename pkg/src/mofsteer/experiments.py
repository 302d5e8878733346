"""Experiment drivers: campaigns, scaling sweeps, ablations and calibration."""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import logging
import math
import statistics
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import yaml

from .config import RunConfig
from .local import LocalRuntimeConfig, run_local
from .simcluster import SimCluster
from .stages import STRICT_STRAIN
from .telemetry import (
    STAGE_GROUPS,
    EventLog,
    UndefinedRate,
    completed_counts,
    discovery_curve,
    group_throughput,
    stable_fraction,
    stability_results,
    write_reports,
)

log = logging.getLogger(__name__)

LOG_NAME = "events.jsonl"
CONFIG_NAME = "config.yaml"


# single runs ---------------------------------------------------------------------


def simulate(config: RunConfig) -> EventLog:
    """Run ``config`` on its backend and return the log."""
    engine = config.build_engine()
    if config.backend == "sim":
        sim = SimCluster(
            engine, config.stage_models, config.fabric, config.seed, config.synthesize_cells,
        )
        return sim.run(config.horizon)
    local = LocalRuntimeConfig(
        virtual_nodes=config.nodes,
        time_scale=config.local.time_scale,
        worker_caps=config.local.worker_caps,
        oversubscription_cap=config.local.oversubscription_cap,
    )
    return run_local(
        local, engine, config.horizon * config.local.time_scale, seed=config.seed,
        models=config.stage_models, fabric=config.fabric, synthesize_cells=config.synthesize_cells,
    )


@dataclass(frozen=True)
class RunSummary:
    nodes: int
    seed: int
    horizon: float
    throughput: Mapping[str, Optional[float]]
    stability_results: int
    stable_count: int
    stable_fraction: float
    completed: Mapping[str, int]

    @property
    def stable_per_node_hour(self) -> float:
        return self.stable_count / (self.nodes * self.horizon / 3600.0) if self.horizon else 0.0


def summarize(log_: EventLog, config: RunConfig) -> RunSummary:
    window = (0.0, config.horizon)
    rates = {}
    for group in STAGE_GROUPS:
        try:
            rates[group] = group_throughput(log_, group, window)
        except UndefinedRate:
            rates[group] = None
    curve = discovery_curve(log_, STRICT_STRAIN, config.horizon)
    return RunSummary(
        nodes=config.nodes,
        seed=config.seed,
        horizon=config.horizon,
        throughput=rates,
        stability_results=len(stability_results(log_)),
        stable_count=curve.total,
        stable_fraction=stable_fraction(log_, STRICT_STRAIN, config.horizon),
        completed=completed_counts(log_, config.horizon),
    )


def simulate_summary(config: RunConfig) -> RunSummary:
    return summarize(simulate(config), config)


def _map(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``map`` that fans out to processes when ``jobs > 1``; order is kept."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# campaigns ------------------------------------------------------------------------


@dataclass(frozen=True)
class CampaignResult:
    directory: Path
    log: EventLog
    reports: Mapping[str, Path]


def run_directory(parent: Union[str, Path], seed: int, stamp: Optional[_dt.datetime] = None) -> Path:
    """Fresh ``<parent>/<timestamp>-seed<seed>`` directory (suffixed if taken)."""
    stamp = stamp or _dt.datetime.now()
    base = Path(parent) / f"{stamp:%Y%m%d-%H%M%S}-seed{seed}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def run_campaign(config: RunConfig, out: Union[str, Path], exact: bool = False) -> CampaignResult:
    """Run, then persist the config snapshot, the log and all reports.

    With ``exact`` the files go straight into ``out``; otherwise into a new
    timestamped subdirectory of it.
    """
    directory = Path(out) if exact else run_directory(out, config.seed)
    directory.mkdir(parents=True, exist_ok=True)
    config.dump(directory / CONFIG_NAME)
    log_ = simulate(config)
    log_.write(directory / LOG_NAME)
    reports = write_reports(log_, directory, config.horizon)
    return CampaignResult(directory, log_, reports)


def regenerate_reports(path: Union[str, Path], out: Optional[Union[str, Path]] = None) -> dict[str, Path]:
    """Rebuild the reports of a finished run from its persisted log."""
    path = Path(path)
    log_path = path / LOG_NAME if path.is_dir() else path
    run_dir = log_path.parent
    horizon = None
    snapshot = run_dir / CONFIG_NAME
    if snapshot.is_file():
        horizon = RunConfig.load(snapshot).horizon
    return write_reports(EventLog.read(log_path), out or run_dir, horizon)


# scaling sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingReport:
    nodes: tuple[int, ...]
    runs: tuple[RunSummary, ...]

    def rate(self, group: str, nodes: int) -> Optional[float]:
        return self.runs[self.nodes.index(nodes)].throughput[group]

    def deviation(self, group: str, nodes: int) -> Optional[float]:
        """Relative gap to the ideal linear rate anchored at the smallest scale."""
        anchor = self.rate(group, self.nodes[0])
        r = self.rate(group, nodes)
        if anchor is None or r is None or anchor == 0:
            return None
        return r / (anchor * nodes / self.nodes[0]) - 1.0

    def rows(self) -> list[dict]:
        out = []
        for n, run in zip(self.nodes, self.runs):
            row = {"nodes": n}
            for g in STAGE_GROUPS:
                row[f"{g}_per_hour"] = run.throughput[g]
                row[f"{g}_deviation"] = self.deviation(g, n)
            out.append(row)
        return out

    def write_csv(self, path: Union[str, Path]) -> Path:
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        return Path(path)

    def format(self) -> str:
        head = f"{'nodes':>6}" + "".join(f"  {g:>24}" for g in STAGE_GROUPS)
        lines = [head]
        for n in self.nodes:
            cells = []
            for g in STAGE_GROUPS:
                r, d = self.rate(g, n), self.deviation(g, n)
                rate = "n/a" if r is None else f"{r:,.1f}/h"
                dev = "" if d is None else f" ({d:+.1%})"
                cells.append(f"  {rate + dev:>24}")
            lines.append(f"{n:>6}" + "".join(cells))
        return "\n".join(lines)


def distinct_nodes(nodes: Iterable[int]) -> tuple[int, ...]:
    seen: list[int] = []
    dupes = []
    for n in nodes:
        if n in seen:
            dupes.append(n)
        else:
            seen.append(n)
    if dupes:
        warnings.warn(f"duplicate node counts ignored: {sorted(set(dupes))}", stacklevel=3)
    if len(seen) < 2:
        raise ValueError(f"a sweep needs at least 2 distinct node counts, got {seen}")
    if min(seen) < 1:
        raise ValueError("node counts must be positive")
    return tuple(sorted(seen))


def sweep(config: RunConfig, nodes: Iterable[int], jobs: int = 1) -> ScalingReport:
    """Run every scale with the config's seed; rates are anchored at the smallest."""
    scales = distinct_nodes(nodes)
    configs = [config.replace(nodes=n) for n in scales]
    return ScalingReport(scales, tuple(_map(simulate_summary, configs, jobs)))


# ablations ------------------------------------------------------------------------

ABLATIONS = {"retrain": "retraining_enabled", "realloc": "reallocation_enabled"}


@dataclass(frozen=True)
class ArmResult:
    name: str
    runs: tuple[RunSummary, ...]

    @property
    def mean_stable_count(self) -> float:
        return statistics.fmean(r.stable_count for r in self.runs)

    @property
    def mean_stable_fraction(self) -> float:
        return statistics.fmean(r.stable_fraction for r in self.runs)


@dataclass(frozen=True)
class Comparison:
    ablation: str
    nodes: int
    horizon: float
    seeds: tuple[int, ...]
    on: ArmResult
    off: ArmResult

    @property
    def stable_count_ratio(self) -> float:
        """ON/OFF ratio of seed-averaged strict-stable counts."""
        off = self.off.mean_stable_count
        return math.inf if off == 0 else self.on.mean_stable_count / off

    def rows(self) -> list[dict]:
        out = []
        for arm in (self.on, self.off):
            for r in arm.runs:
                row = {"arm": arm.name, "seed": r.seed, "stable_count": r.stable_count,
                       "stable_fraction": r.stable_fraction, "stability_results": r.stability_results}
                row.update({f"{g}_per_hour": r.throughput[g] for g in STAGE_GROUPS})
                out.append(row)
        return out

    def write_csv(self, path: Union[str, Path]) -> Path:
        rows = self.rows()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        return Path(path)

    def format(self) -> str:
        lines = [f"{self.ablation} ablation, {self.nodes} nodes, {self.horizon:g} s, seeds {list(self.seeds)}"]
        for arm in (self.on, self.off):
            lines.append(
                f"  {arm.name:<4} stable MOFs {arm.mean_stable_count:8.1f}   "
                f"stable fraction {arm.mean_stable_fraction:6.2%}"
            )
        lines.append(f"  ON/OFF stable-count ratio {self.stable_count_ratio:.3f}")
        return "\n".join(lines)


def compare(
    config: RunConfig,
    ablation: str = "retrain",
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    jobs: int = 1,
) -> Comparison:
    """The same config with one feature switched on and off, over shared seeds."""
    try:
        flag = ABLATIONS[ablation]
    except KeyError:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {sorted(ABLATIONS)}") from None
    seeds = tuple(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    arms = {}
    for name, enabled in (("ON", True), ("OFF", False)):
        configs = [dataclasses.replace(config, seed=s, **{flag: enabled}) for s in seeds]
        arms[name] = ArmResult(name, tuple(_map(simulate_summary, configs, jobs)))
    return Comparison(ablation, config.nodes, config.horizon, seeds, arms["ON"], arms["OFF"])


# calibration ---------------------------------------------------------------------


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationTarget:
    nodes: int
    horizon: float
    stable_fraction: float
    tolerance: float = 0.005


# strict-stable fraction with retraining at 32 and 64 nodes after 90 minutes
PRIMARY_TARGET = CalibrationTarget(32, 5400.0, 0.11)
SECONDARY_TARGET = CalibrationTarget(64, 5400.0, 0.12)


@dataclass(frozen=True)
class CalibrationResult:
    learning_rate: float
    max_stable_fraction: float
    achieved: Mapping[int, float]
    seeds: tuple[int, ...]
    evaluations: int = 0
    history: tuple = field(default=(), compare=False)

    def write(self, path: Union[str, Path], targets: Sequence[CalibrationTarget] = ()) -> Path:
        doc = {
            "quality": {
                "learning_rate": self.learning_rate,
                "max_stable_fraction": self.max_stable_fraction,
            },
            "fit": {
                "seeds": list(self.seeds),
                "targets": [dataclasses.asdict(t) for t in targets],
                "achieved_stable_fraction": {int(k): float(v) for k, v in self.achieved.items()},
            },
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(doc, fh, sort_keys=False)
        return path


def _bisect(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    target: float,
    tolerance: float,
    what: str,
    max_iter: int = 40,
    geometric: bool = False,
) -> tuple[float, float]:
    """``(x, f(x))`` with ``|f(x) - target| <= tolerance`` for increasing ``f``.

    ``geometric`` splits the interval at its geometric mean, for ranges
    spanning orders of magnitude.
    """
    if geometric and lo <= 0:
        raise ValueError("a geometric search needs a positive lower bound")
    f_lo = f(lo)
    if abs(f_lo - target) <= tolerance:
        return lo, f_lo
    f_hi = f(hi)
    if abs(f_hi - target) <= tolerance:
        return hi, f_hi
    if not f_lo < target < f_hi:
        raise CalibrationError(
            f"{what} range [{lo:g}, {hi:g}] does not bracket the target {target:g}: "
            f"f({lo:g}) = {f_lo:.4f}, f({hi:g}) = {f_hi:.4f}"
        )
    best = min(((lo, f_lo), (hi, f_hi)), key=lambda p: abs(p[1] - target))
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi) if geometric else 0.5 * (lo + hi)
        f_mid = f(mid)
        if abs(f_mid - target) < abs(best[1] - target):
            best = (mid, f_mid)
        if abs(f_mid - target) <= tolerance:
            return mid, f_mid
        if f_mid < target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"{what}: no value within {tolerance:g} of {target:g} after {max_iter} steps "
        f"(closest {best[0]:g} -> {best[1]:.4f})"
    )


def calibrate(
    config: RunConfig,
    primary: CalibrationTarget = PRIMARY_TARGET,
    secondary: Optional[CalibrationTarget] = SECONDARY_TARGET,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    alpha_range: tuple[float, float] = (1e-6, 1e-3),
    max_fraction_range: tuple[float, float] = (0.14, 0.30),
    jobs: int = 1,
    inner_tolerance: Optional[float] = None,
) -> CalibrationResult:
    """Fit the learning rate (and optionally the stable-fraction ceiling).

    The learning rate is bisected until the seed-averaged strict-stable
    fraction with retraining at ``primary`` lands within its tolerance. With
    a ``secondary`` target, the ceiling is bisected in an outer loop, each
    step refitting the learning rate, until the second scale matches too.
    """
    seeds = tuple(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    history = []

    def fraction(target: CalibrationTarget, alpha: float, ceiling: float) -> float:
        quality = dataclasses.replace(config.quality, learning_rate=alpha, max_stable_fraction=ceiling)
        configs = [
            dataclasses.replace(config, nodes=target.nodes, horizon=target.horizon, seed=s,
                                quality=quality, retraining_enabled=True, backend="sim")
            for s in seeds
        ]
        value = statistics.fmean(r.stable_fraction for r in _map(simulate_summary, configs, jobs))
        history.append((target.nodes, alpha, ceiling, value))
        log.info("nodes=%d alpha=%.6g ceiling=%.4f -> stable fraction %.4f", target.nodes, alpha, ceiling, value)
        return value

    tol = inner_tolerance if inner_tolerance is not None else primary.tolerance

    def fit_alpha(ceiling: float) -> tuple[float, float]:
        lo, hi = alpha_range
        return _bisect(lambda a: fraction(primary, a, ceiling), lo, hi,
                       primary.stable_fraction, tol, f"learning rate (ceiling {ceiling:g})", geometric=True)

    if secondary is None:
        ceiling = config.quality.max_stable_fraction
        alpha, achieved = fit_alpha(ceiling)
        return CalibrationResult(alpha, ceiling, {primary.nodes: achieved}, seeds, len(history), tuple(history))

    fitted: dict[float, tuple[float, float]] = {}

    def secondary_fraction(ceiling: float) -> float:
        fitted[ceiling] = fit_alpha(ceiling)
        return fraction(secondary, fitted[ceiling][0], ceiling)

    lo, hi = max_fraction_range
    ceiling, second = _bisect(secondary_fraction, lo, hi, secondary.stable_fraction,
                              secondary.tolerance, "stable-fraction ceiling")
    alpha, first = fitted[ceiling]
    return CalibrationResult(
        alpha, ceiling, {primary.nodes: first, secondary.nodes: second}, seeds, len(history), tuple(history),
    )

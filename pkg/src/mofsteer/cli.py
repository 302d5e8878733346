"""Command-line driver: ``mofsteer run|sweep|calibrate|compare|report``.

Exit status is 0 on success, 1 for an invalid configuration and 2 when a
run fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig
from . import experiments

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; bad usage is a configuration error here
    def error(self, message):
        raise _ArgumentError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", choices=("sim", "local"))
    p.add_argument("--nodes", type=int)
    p.add_argument("--horizon", type=float, help="campaign length in simulated seconds")
    p.add_argument("--no-retrain", action="store_true", help="disable generator retraining")
    p.add_argument("--no-realloc", action="store_true", help="disable node reallocation")
    p.add_argument("--jobs", type=int, default=1, help="independent simulations to run at once")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mofsteer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one campaign and write its log and reports")
    _common(p)

    p = sub.add_parser("sweep", help="throughput at several scales and deviation from linear")
    _common(p)
    p.add_argument("--scales", type=int, nargs="+", default=[32, 64, 128, 256, 450],
                   help="node counts to run (default: 32 64 128 256 450)")

    p = sub.add_parser("compare", help="feature on vs off over shared seeds")
    _common(p)
    p.add_argument("--ablation", choices=sorted(experiments.ABLATIONS), default="retrain")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])

    p = sub.add_parser("calibrate", help="fit the learning rate to stable-fraction targets")
    _common(p)
    p.add_argument("--target", type=float, default=experiments.PRIMARY_TARGET.stable_fraction,
                   help="strict-stable fraction to reach with retraining (default: 0.11)")
    p.add_argument("--target-nodes", type=int, default=experiments.PRIMARY_TARGET.nodes)
    p.add_argument("--target-horizon", type=float, default=experiments.PRIMARY_TARGET.horizon)
    p.add_argument("--tolerance", type=float, default=experiments.PRIMARY_TARGET.tolerance)
    p.add_argument("--second-target", type=float, default=None,
                   help="also fit the stable-fraction ceiling to this fraction at --second-nodes")
    p.add_argument("--second-nodes", type=int, default=experiments.SECONDARY_TARGET.nodes)
    p.add_argument("--alpha-range", type=float, nargs=2, default=[1e-6, 1e-3], metavar=("LO", "HI"))
    p.add_argument("--ceiling-range", type=float, nargs=2, default=[0.14, 0.30], metavar=("LO", "HI"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--write", type=Path, help="calibration file to write (default: <out>/calibration.yaml)")

    p = sub.add_parser("report", help="rebuild reports from a persisted run")
    p.add_argument("run", type=Path, help="run directory or log file")
    p.add_argument("--out", type=Path, help="where to write the reports (default: next to the log)")
    return parser


def _config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig.default()
    config = config.replace(seed=args.seed, backend=args.backend, nodes=args.nodes, horizon=args.horizon)
    if args.no_retrain:
        config = config.replace(retraining_enabled=False)
    if args.no_realloc:
        config = config.replace(reallocation_enabled=False)
    config.layout()
    return config


def _run(args) -> None:
    config = _config(args)
    result = experiments.run_campaign(config, args.out)
    print(f"wrote {result.directory}")
    for name, path in result.reports.items():
        print(f"  {name}: {path.name}")


def _sweep(args) -> None:
    config = _config(args)
    try:
        scales = experiments.distinct_nodes(args.scales)
    except ValueError as exc:
        raise ConfigError("scales", str(exc)) from None
    for n in scales:
        config.replace(nodes=n).layout()
    report = experiments.sweep(config, scales, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    path = report.write_csv(args.out / "scaling.csv")
    print(report.format())
    print(f"wrote {path}")


def _compare(args) -> None:
    config = _config(args)
    result = experiments.compare(config, args.ablation, args.seeds, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    path = result.write_csv(args.out / f"compare-{args.ablation}-{config.nodes}.csv")
    print(result.format())
    print(f"wrote {path}")


def _calibrate(args) -> None:
    config = _config(args)
    primary = experiments.CalibrationTarget(args.target_nodes, args.target_horizon, args.target, args.tolerance)
    secondary = None
    if args.second_target is not None:
        secondary = experiments.CalibrationTarget(args.second_nodes, args.target_horizon, args.second_target,
                                                  args.tolerance)
    result = experiments.calibrate(
        config, primary, secondary, args.seeds, tuple(args.alpha_range), tuple(args.ceiling_range), args.jobs,
    )
    path = args.write or args.out / "calibration.yaml"
    result.write(path, [t for t in (primary, secondary) if t is not None])
    print(f"learning_rate = {result.learning_rate:.6g}")
    print(f"max_stable_fraction = {result.max_stable_fraction:.6g}")
    for nodes, fraction in result.achieved.items():
        print(f"  {nodes} nodes: stable fraction {fraction:.4f}")
    print(f"wrote {path}")


def _report(args) -> None:
    paths = experiments.regenerate_reports(args.run, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")


_COMMANDS = {"run": _run, "sweep": _sweep, "compare": _compare, "calibrate": _calibrate, "report": _report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        parser.print_usage(sys.stderr)
        print(f"mofsteer: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.simplefilter("default")
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"mofsteer: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except experiments.CalibrationError as exc:
        print(f"mofsteer: calibration failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"mofsteer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

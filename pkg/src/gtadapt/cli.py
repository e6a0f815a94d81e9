"""Command-line front end: ``gtadapt {simulate,sweep,bounds,verify}``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import bounds, harness

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load(args) -> harness.ExperimentConfig:
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {args.config}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    # flags win over the file
    if args.seed is not None:
        raw["master_seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    if getattr(args, "trials", None) is not None:
        raw["trials"] = args.trials
    raw.pop("out", None)
    try:
        return harness.ExperimentConfig.from_dict(raw)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text, newline="")
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from exc


def cmd_simulate(args) -> int:
    cfg = _load(args)
    summary = harness.run_experiment(cfg)
    _write(args.out, harness.trials_csv(summary.trials))
    doc = json.dumps({"config": cfg.to_dict(), **summary.to_json()}, indent=2, sort_keys=True) + "\n"
    if args.summary:
        _write(args.summary, doc)
    else:
        sys.stderr.write(doc)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated numbers: {exc}") from exc
    try:
        rows = harness.sweep(cfg, args.knob, values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write(args.out, harness.sweep_csv(rows))
    return EXIT_OK


def cmd_bounds(args) -> int:
    try:
        sources = bounds.parse_sources(args.sources)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not sources:
        raise UsageError("no sources requested")
    if args.grid < 1:
        raise UsageError("--theta-grid must be at least 1")
    try:
        rows = bounds.emit_curves(args.rho, bounds.theta_grid(args.grid), sources)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write(args.out, bounds.curves_csv(rows))
    return EXIT_OK


def cmd_verify(args) -> int:
    only = [n.strip() for item in (args.only or []) for n in item.split(",") if n.strip()]
    try:
        checks = harness.run_batteries(only or None, inject_fault=args.inject_fault)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.battery:<18} {c.name:<40} {c.detail}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def _experiment_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", required=True, help="JSON experiment config")
    sp.add_argument("--seed", type=int, help="override master_seed")
    sp.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    sp.add_argument("--trials", type=int, help="override the trial count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtadapt", description="Adaptive noisy group testing experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="run one Monte Carlo experiment")
    _experiment_flags(sp)
    sp.add_argument("--out", help="per-trial CSV path (default: stdout)")
    sp.add_argument("--summary", help="JSON summary path (default: stderr)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="run one experiment per value of a budget knob")
    _experiment_flags(sp)
    sp.add_argument("--knob", required=True, help="budget field to vary, e.g. c1")
    sp.add_argument("--values", required=True, help="comma-separated knob values")
    sp.add_argument("--out", help="summary CSV path (default: stdout)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bounds", help="emit rate curves as CSV")
    sp.add_argument("--rho", type=float, required=True, help="noise level")
    sp.add_argument("--theta-grid", "--grid", dest="grid", type=int, default=99,
                    help="number of interior theta points i/(N+1) (default 99)")
    sp.add_argument("--sources", default="all",
                    help=f"'all' or a comma list of: {', '.join(bounds.SOURCES)}")
    sp.add_argument("--out", help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("verify", help="run invariant batteries and report pass/fail")
    sp.add_argument("--only", action="append",
                    help=f"battery to run, repeatable or comma list: {', '.join(harness.BATTERIES)}")
    sp.add_argument("--inject-fault", action="store_true",
                    help="negate every checked inequality; the run must then fail")
    sp.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gtadapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point ``mnl``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .engine import SimulationBlowUp
from .linear import NotHurwitzError
from .scenarios import ConfigError, apply_overrides, load_config, parse_scenario, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _report_config_error(exc: ConfigError) -> int:
    for path, msg in exc.diagnostics:
        print(f"config error: {path or '<root>'}: {msg}", file=sys.stderr)
    return EXIT_CONFIG


def _load(path: str, overrides: list[str]) -> dict:
    try:
        doc = load_config(path)
    except OSError as exc:
        raise ConfigError([("", f"cannot read {path}: {exc.strerror}")]) from None
    return apply_overrides(doc, overrides)


def cmd_validate(args) -> int:
    try:
        parse_scenario(_load(args.config, args.set))
    except ConfigError as exc:
        return _report_config_error(exc)
    print("ok")
    return EXIT_OK


def _seed_of(doc: dict):
    ens = doc.get("ensemble")
    return ens.get("seed") if isinstance(ens, dict) else None


def cmd_run(args) -> int:
    start = time.perf_counter()
    try:
        doc = _load(args.config, args.set)
        sc = parse_scenario(doc)
    except ConfigError as exc:
        return _report_config_error(exc)
    try:
        result = run_scenario(sc, n_workers=args.workers)
        analysis = _dump(result.analysis)
    except (SimulationBlowUp, NotHurwitzError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = {"analysis.json": analysis}
    if result.timeseries is not None:
        written["timeseries.csv"] = result.timeseries
    if result.histogram is not None:
        written["histogram.csv"] = result.histogram
    for name, text in written.items():
        (out / name).write_text(text, encoding="utf-8")
    manifest = {
        "mnl_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "config_path": str(args.config),
        "overrides": list(args.set),
        "config": doc,
        "scenario": sc.kind,
        "seed": _seed_of(doc),
        "outputs": sorted(written) + ["manifest.json"],
        "wall_time_seconds": time.perf_counter() - start,
    }
    (out / "manifest.json").write_text(_dump(manifest), encoding="utf-8")
    print(f"wrote {', '.join(manifest['outputs'])} to {out}")
    return EXIT_OK


def cmd_version(args) -> int:
    print(f"mnl {__version__}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mnl", description="Classical systems under continuous measurement.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its artifacts")
    run.add_argument("config")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config value by dotted key path (repeatable)")
    run.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
    run.add_argument("--workers", type=int, default=1, help="worker threads; results do not depend on it")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a config and report every problem")
    val.add_argument("config")
    val.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    val.set_defaults(func=cmd_validate)

    ver = sub.add_parser("version", help="print the package version")
    ver.set_defaults(func=cmd_version)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if getattr(args, "workers", 1) < 1:
        print("config error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

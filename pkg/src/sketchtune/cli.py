"""Command-line entry point.

Exit codes: 0 success, 1 validation error (config, data, sketch, parameter
or report problems), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .market_data import MarketDataError, check_calendar, export_series
from .pipeline import (
    STRATEGIES,
    ComparisonError,
    cmd_backtest,
    cmd_fit,
    cmd_report,
    dump_indicators,
    load_dataset,
    write_report,
)
from .policy import PolicyError
from .sketch import SINGLE, Mode, SketchError, parse_sketch, render_sketch

log = logging.getLogger("sketchtune")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, MarketDataError, SketchError, PolicyError, ComparisonError)


def _ingest(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(cfg)
    summary = []
    for a in ds.assets + ([ds.index] if ds.index else []):
        if a.calendar:
            check_calendar(a)
        summary.append({"asset": a.asset_id, "bars": len(a), "first": int(a.timestamps[0]),
                        "last": int(a.timestamps[-1]), "interval": a.interval})
        if args.export:
            Path(args.export).mkdir(parents=True, exist_ok=True)
            export_series(a, Path(args.export) / f"{a.asset_id}.csv")
    splits = [s.to_dict() for s in ds.splits()]
    doc = {"assets": summary, "splits": splits}
    if cfg.mode == "oe":
        doc["orders"] = len(ds.tasks)
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _fit(args) -> int:
    cfg = load_config(args.config)
    if args.budget is not None:
        cfg.budget = args.budget
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.budget < 1:
        raise ConfigError("budget must be >= 1")
    for p in cmd_fit(cfg, Path(args.out) if args.out else None):
        print(p)
    return EXIT_OK


def _backtest(args) -> int:
    cfg = load_config(args.config)
    params = [Path(p) for p in args.params or []]
    if args.params_dir:
        params += sorted(Path(args.params_dir).glob("params_split*.json"))
    report = cmd_backtest(cfg, params, args.strategy, args.label)
    out = Path(args.out) if args.out else cfg.output / f"report_{report['label']}.json"
    write_report(report, out)
    print(out)
    return EXIT_OK


def _report(args) -> int:
    rows = cmd_report([Path(p) for p in args.reports], Path(args.out), plots=not args.no_plots)
    print((Path(args.out) / "comparison.txt").read_text(encoding="utf-8"), end="")
    return EXIT_OK if rows else EXIT_RUNTIME


def _sketch_check(args) -> int:
    mode = SINGLE if args.mode == "single" else Mode.ensemble(args.k)
    text = Path(args.file).read_text(encoding="utf-8") if args.file != "-" else sys.stdin.read()
    template = parse_sketch(text, mode)
    print(render_sketch(template))
    print(f"# {template.n_thresholds} thresholds, {template.n_holes} holes ({mode})")
    return EXIT_OK


def _indicators(args) -> int:
    for p in dump_indicators(load_config(args.config), Path(args.out)):
        print(p)
    return EXIT_OK


def _demo(args) -> int:
    from .synthetic import write_demo

    cfg = write_demo(Path(args.out), args.seed, args.mode)
    print(cfg)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sketchtune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="load and validate the configured data")
    s.add_argument("--config", required=True)
    s.add_argument("--export", help="write the validated series to this directory")
    s.set_defaults(func=_ingest)

    s = sub.add_parser("fit", help="fit the sketch holes on every rolling split")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default: the config's output)")
    s.add_argument("--budget", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=_fit)

    s = sub.add_parser("backtest", help="run a strategy over the test windows")
    s.add_argument("--config", required=True)
    s.add_argument("--params", nargs="*", help="parameter files from fit")
    s.add_argument("--params-dir", help="directory holding params_split*.json")
    s.add_argument("--strategy", default="tuned", choices=sorted({x for v in STRATEGIES.values() for x in v}))
    s.add_argument("--label")
    s.add_argument("--out", help="report path (.json; a .txt rendering is written alongside)")
    s.set_defaults(func=_backtest)

    s = sub.add_parser("report", help="compare run reports")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=_report)

    s = sub.add_parser("sketch", help="sketch utilities")
    ssub = s.add_subparsers(dest="sketch_command", required=True)
    c = ssub.add_parser("check", help="parse and validate a rule file")
    c.add_argument("file", help="rule file, or - for stdin")
    c.add_argument("--mode", choices=("single", "ensemble"), default="single")
    c.add_argument("--k", type=int, default=3, help="number of sub-policies in ensemble mode")
    c.set_defaults(func=_sketch_check)

    s = sub.add_parser("indicators", help="dump per-asset indicator tables")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_indicators)

    s = sub.add_parser("demo", help="write a synthetic dataset and a config that uses it")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mode", choices=("st", "oe"), default="st")
    s.set_defaults(func=_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here that code means a runtime failure
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(exc, FileNotFoundError) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

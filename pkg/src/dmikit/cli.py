"""Command-line entry point.

    dmikit run --config cfg.json --out runs/x [--seed 0 --seed 1]
    dmikit eval-embeddings --manifest dumps/manifest.json --out eval/
    dmikit report --records runs/a runs/b --out table.csv

Exit codes: 0 on success, 1 when some seeds failed, 2 on configuration or
input errors.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .metrics import EvaluationError, MetricError
from .runner import (
    ConfigError,
    DumpError,
    ReportError,
    RunConfig,
    eval_external,
    format_report,
    report,
    run_experiment,
)

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmikit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one configuration")
    run.add_argument("--config", required=True, help="JSON run configuration")
    run.add_argument("--out", help="output directory (defaults to the config's output_dir)")
    run.add_argument("--seed", type=int, action="append", dest="seeds",
                     help="replicate seed; repeat to run several (overrides the config)")

    ev = sub.add_parser("eval-embeddings", help="score external embedding dumps")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="tabulate run records")
    rep.add_argument("--records", nargs="+", required=True,
                     help="record.json files or run directories, one per configuration")
    rep.add_argument("--out", required=True, help="CSV path; a .txt rendering is written alongside")
    return p


def _run(args) -> int:
    config = RunConfig.load(args.config)
    if args.seeds:
        config.seeds = list(args.seeds)
    result = run_experiment(config, args.out)
    for seed, rec in sorted(result["records"].items()):
        m = rec["metrics"]
        print(f"seed {seed}: acc={m['acc']:.4f} bwt={_fmt(m['bwt'])} "
              f"dmi=({_fmt(m['dmi_stab'])}, {_fmt(m['dmi_plas'])}, {_fmt(m['dmi_gen'])})")
    for seed, err in sorted(result["failures"].items()):
        print(f"seed {seed}: FAILED {err}", file=sys.stderr)
    return EXIT_PARTIAL if result["failures"] else EXIT_OK


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "eval-embeddings":
            result = eval_external(args.manifest, args.out)
            m = result["metrics"]
            print(f"dmi=({_fmt(m['dmi_stab'])}, {_fmt(m['dmi_plas'])}, {_fmt(m['dmi_gen'])})")
            return EXIT_OK
        rows = report(args.records, args.out)
        print(format_report(rows), end="")
        return EXIT_OK
    except (ConfigError, DumpError, ReportError, MetricError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

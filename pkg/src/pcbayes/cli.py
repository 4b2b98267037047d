"""Command-line front end: ``pcbayes run | validate | report``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .harness import ConfigError, load_config, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcbayes",
        description="Run sampling-free Bayesian identification experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config", help="path to the experiment config file")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.add_argument("--out", help="override the output directory")
    run.add_argument(
        "--filter", choices=("lbu", "nlbu2", "general", "enkf"),
        help="override the configured filter",
    )

    val = sub.add_parser("validate", help="check a config file")
    val.add_argument("config")

    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("run_dir")
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if args.filter is not None:
        cfg = replace(cfg, filter_kind=args.filter)
    report = run_experiment(cfg)
    last = report.rows[-1]
    print(f"{cfg.experiment_id}: {len(report.rows)} cycles -> {cfg.out_dir}")
    print(
        f"final rms={last.rms:.6g} trace={last.post_trace:.6g} "
        f"loss={last.loss:.6g}"
    )
    return 0


def _cmd_validate(args) -> int:
    load_config(args.config)
    print(f"{args.config}: OK")
    return 0


def _cmd_report(args) -> int:
    path = Path(args.run_dir) / "report.csv"
    if not path.exists():
        print(f"no report.csv under {args.run_dir}", file=sys.stderr)
        return 1
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    print("  ".join(header[:7]))
    for line in lines[1:]:
        cells = line.split(",")
        print("  ".join(f"{float(c):.6g}" if i else c
                        for i, c in enumerate(cells[:7])))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        return _cmd_report(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

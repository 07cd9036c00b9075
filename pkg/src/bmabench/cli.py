"""Command-line entry point.

Subcommands map onto the pipeline stages:

    train      member training for every matrix cell
    coreset    weighting posteriors + coreset construction (mcmc cells)
    sample     NUTS sampling on the coresets (mcmc cells)
    evaluate   prediction + metrics rows, writes results.csv
    report     results.csv + SVG curves from recorded rows
    run        evaluate then report (the full matrix)

Failures exit nonzero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import harness


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmabench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "coreset", "sample", "evaluate", "report", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults applied per profile)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--workers", type=int, help="concurrent member trainings")
        p.add_argument("--profile", choices=("paper", "desk"), default="desk")
    return parser


def _load_config(args) -> harness.ExperimentConfig:
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
    cfg = harness.config_from_dict(overrides, profile=args.profile)
    updates = {}
    if args.out:
        updates["out_dir"] = args.out
    if args.workers:
        updates["workers"] = args.workers
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command in ("train", "coreset", "sample", "evaluate"):
            out = harness.run_stage(cfg, args.command)
        elif args.command == "report":
            out = harness.emit_report(cfg.out_dir)
            print(f"report written under {cfg.out_dir}")
            return 0
        else:  # run
            out = harness.run_experiment(cfg)
            harness.emit_report(out)
        print(f"done: {out}")
        return 0
    except Exception as exc:  # noqa: BLE001 - single translation point to exit codes
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``fedcal <subcommand> --config FILE``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import load_config

SUBCOMMANDS = ("partition", "sample", "aggregate", "tune-beta", "distill", "eval", "gp-verify", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcal", description="One-shot federated Bayesian ensembles.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--out", help="output directory (defaults to the config's output)")
        p.add_argument("--seed-override", type=int, action="append",
                       help="run only this seed; repeat for several")
        p.add_argument("--workers", type=int, default=1, help="client sampling threads")
        if name == "run":
            p.add_argument("--stage", choices=pipeline.STAGES,
                           help="run a single stage instead of the whole pipeline")
        if name == "gp-verify":
            p.add_argument("--partition", choices=("homogeneous", "heterogeneous", "both"), default="both")
    return parser


def _dispatch(args) -> list[str]:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output)
    seeds = args.seed_override or cfg.seeds
    if args.command == "gp-verify":
        return [str(p) for p in pipeline.stage_gp_verify(cfg, out, args.partition, seeds[0])]
    if cfg.task not in ("classification", "regression") and args.command != "run":
        raise ValueError(f"subcommand {args.command!r} needs a classification or regression task")
    if args.command == "run" and args.stage is None:
        return [str(pipeline.run(cfg, out, seeds, args.workers))]
    stage = args.stage if args.command == "run" else args.command
    written = []
    for seed in seeds:
        path = pipeline.run_stage(cfg, stage, seed, out, args.workers)
        written += [str(p) for p in (path if isinstance(path, list) else [path]) if p is not None]
    return written


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDCAL_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        written = _dispatch(args)
    except Exception as exc:  # reported as JSON for callers that parse stderr
        logging.getLogger("fedcal").debug("failure", exc_info=True)
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if isinstance(exc, FileNotFoundError) and exc.filename:
            err["path"] = exc.filename
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, FileNotFoundError) else 1
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())

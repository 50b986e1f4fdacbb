"""Command-line entry point: ``tlens run|resume|validate``."""

from __future__ import annotations

import argparse
import sys

from .experiments import ConfigError, load_config, resume_experiment, run_experiment
from .smoother import SmootherBudgetError
from .train import InvariantError

EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_BUDGET = 4
EXIT_DATA = 5


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tlens", description="Telescoping-model training instrumentation.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config")
    run.add_argument("--output", help="override [experiment] output")
    run.add_argument("--emit-gnuplot", action="store_true", help="write a gnuplot script next to the summary CSV")
    res = sub.add_parser("resume", help="continue a run from one of its checkpoints")
    res.add_argument("checkpoint")
    res.add_argument("config")
    res.add_argument("--output", help="override [experiment] output")
    res.add_argument("--emit-gnuplot", action="store_true")
    val = sub.add_parser("validate", help="check a config file against the schema without running it")
    val.add_argument("config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok ({cfg.name}, seeds {list(cfg.seeds)})")
            return 0
        if args.emit_gnuplot:
            cfg["experiment"]["emit_gnuplot"] = True
        if args.command == "run":
            summary = run_experiment(cfg, args.output)
        else:
            summary = resume_experiment(args.checkpoint, cfg, args.output)
        print(f"summary -> {summary}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except SmootherBudgetError as exc:
        print(f"memory budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except FileNotFoundError as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

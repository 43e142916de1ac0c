"""Command-line entry point: ``mgspa <command> [--config FILE] [--seed K] [--out DIR]``.

On failure a JSON error record is printed to stderr and the exit code is
non-zero (2 for configuration errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import COMMANDS, load_config, run_command
from .model import ConfigurationError

# --gamma means a different discount factor for each command
_GAMMA_KEY = {
    "plan": "planning.gamma",
    "solve-stage": "planning.gamma",
    "train-rmaq": "rmaq.gamma",
    "evaluate": "planning.gamma",
    "matrix": "planning.gamma",
    "train-rmaac": "hyperparameters.gamma",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgspa", description="Robust multi-agent planning and learning under state perturbations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--seed", type=int, action="append", help="seed (repeatable); replaces the configured seed list")
        p.add_argument("--out", help="output directory")
        p.add_argument("--gamma", type=float, help="discount factor")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key, e.g. hyperparameters.tau=0.02")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = [f"command={args.command}"] + list(args.set)
        if args.seed:
            overrides.append("seeds=[" + ",".join(str(s) for s in args.seed) + "]")
        if args.out:
            overrides.append(f"out={json.dumps(args.out)}")
        if args.gamma is not None:
            overrides.append(f"{_GAMMA_KEY[args.command]}={args.gamma!r}")
        config = load_config(args.config, overrides)
        result = run_command(config)
    except ConfigurationError as exc:
        print(json.dumps({"error": "configuration", "type": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 2
    except Exception as exc:  # every failure leaves a machine-readable record
        print(json.dumps({"error": "runtime", "type": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())

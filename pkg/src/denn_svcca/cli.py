"""Command-line entry point: ``denn-svcca <stage> --config FILE [options]``.

Exit codes
----------
0  success
2  usage error (unknown subcommand, missing flag)
3  invalid configuration
4  missing or inconsistent input (absent runs, hash mismatch)
5  numerical failure (non-finite training, failed oracle solve)
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .bvp import FDSolveError
from .config import ConfigError, load_config
from .experiment import ManifestMismatchError, MissingInputError, grid_keys, train_grid
from .trainer import TrainingError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_NUMERICAL = 5

log = logging.getLogger("denn_svcca")


def _seed_list(raw: str) -> list[int]:
    return [int(v) for v in raw.split(",") if v.strip()]


def _float_list(raw: str) -> list[float]:
    return [float(v) for v in raw.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="denn-svcca",
        description="Train Poisson-solver networks and measure layer generality with SVCCA.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment INI file")
    common.add_argument("--out", help="output root (overrides the config and the environment)")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--width", type=_seed_list, help="comma-separated widths to include")
    common.add_argument("--xprime", type=_float_list, help="comma-separated source positions x' to include")
    common.add_argument("--seed", type=_seed_list, help="comma-separated seed indices to include")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{train,analyze,metrics,transfer,oracle,components}")
    sub.required = True
    for name, help_text in [
        ("train", "train the (width, x', seed) grid; resumable"),
        ("analyze", "similarity matrices and their decomposition"),
        ("metrics", "dimensionality, reproducibility and specificity per width and layer"),
        ("transfer", "layer-transfer experiment and transfer specificity"),
        ("oracle", "finite-difference reference solutions and network errors"),
        ("components", "principal-component fields of one layer"),
    ]:
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def run(args: argparse.Namespace) -> int:
    from . import pipeline
    from .transfer import run_transfer_stage

    cfg = load_config(args.config, args.out)
    jobs = args.jobs if args.jobs is not None else cfg.jobs
    if jobs < 1:
        raise ConfigError("--jobs", "must be >= 1")
    cfg.output.mkdir(parents=True, exist_ok=True)
    if args.command == "train":
        keys = grid_keys(cfg, args.width, args.xprime, args.seed)
        path = train_grid(cfg, keys, jobs)
    elif args.command == "analyze":
        path = pipeline.analyze(cfg, args.width, jobs)
    elif args.command == "metrics":
        path = pipeline.metrics(cfg, args.width)
    elif args.command == "transfer":
        paths = run_transfer_stage(cfg, args.width, jobs)
        path = paths["manifest"]
    elif args.command == "oracle":
        path = pipeline.oracle(cfg, args.width, args.xprime, args.seed)
    else:
        path = pipeline.components(cfg, args.width, args.xprime, args.seed)
    print(path)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(message)s",
    )
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, ManifestMismatchError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, FDSolveError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PermissionError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""
gen-data: write a synthetic dataset
"""

import argparse
import logging

from commands.common import positive_int, seed_int
from utils.datagen import generate_hetero, generate_xi, write_dataset
from utils.errors import UsageError
from utils.settings import ExitCodes

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("gen-data", help="Generate a synthetic dataset")
    parser.add_argument("--task", choices=("xi", "hetero"), default="xi")
    parser.add_argument("--n", type=positive_int, required=True, help="number of examples")
    parser.add_argument("--seed", type=seed_int, default=0)
    parser.add_argument("--jitter", type=float, default=0.05, help="X/I point jitter")
    parser.add_argument("--points", type=positive_int, default=64, help="hetero: points per cloud")
    parser.add_argument("--tabular", type=positive_int, default=8, help="hetero: tabular columns")
    parser.add_argument("--informative", type=int, default=None,
                        help="hetero: informative columns (default: half)")
    parser.add_argument("--out", required=True, help="output .ndjson path")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    if args.task == "xi":
        if args.jitter < 0:
            raise UsageError("--jitter must be non-negative")
        dataset = generate_xi(args.n, args.seed, args.jitter)
    else:
        dataset = generate_hetero(args.n, args.points, args.tabular, args.seed, args.informative)
    write_dataset(args.out, dataset)
    manifest = dataset.manifest
    logger.info("Wrote %d examples (K=%d, D=%d, balance %s, seed %d) to %s",
                manifest.n_examples, manifest.K, manifest.D, manifest.class_balance, args.seed, args.out)
    return ExitCodes.OK

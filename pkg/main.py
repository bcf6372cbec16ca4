"""
SVEHNN Explanation Toolkit
Shapley attributions for point cloud + tabular networks
"""

import argparse
import logging
import sys
from typing import List, Optional

from commands import benchmark, explain, gen_data, train, verify_prob
from utils import __version__
from utils.errors import (DatasetError, DomainError, ExplanationRefused,
                          ModelFormatError, ShapeError, TrainingDivergedError,
                          UsageError, VerificationFailed)
from utils.settings import TOOL_NAME, ExitCodes, configure_logging

logger = logging.getLogger(TOOL_NAME)

COMMANDS = (gen_data, train, explain, verify_prob, benchmark)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=TOOL_NAME,
        description="Shapley-value explanations for Wide and Deep PointNet classifiers")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True
    for command in COMMANDS:
        command.add_parser(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return ExitCodes.OK if exc.code in (0, None) else ExitCodes.USAGE
    configure_logging(args.log_level)

    try:
        return args.handler(args)
    except ExplanationRefused as exc:
        logger.error("Refused: %s", exc)
        return ExitCodes.REFUSED
    except (VerificationFailed, TrainingDivergedError) as exc:
        logger.error("%s", exc)
        return ExitCodes.CHECK_FAILED
    except (UsageError, DatasetError, ModelFormatError, ShapeError, DomainError,
            FileNotFoundError) as exc:
        logger.error("%s", exc)
        return ExitCodes.USAGE


if __name__ == "__main__":
    sys.exit(main())

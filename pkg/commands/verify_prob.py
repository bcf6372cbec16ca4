"""
verify-prob: Monte-Carlo checks of the probabilistic layers
"""

import argparse
import logging
import time

from commands.common import args_config, positive_int, seed_int, write_payload
from utils.errors import VerificationFailed
from utils.settings import ExitCodes, Tolerances
from utils.verification import SABOTAGE_MODES, ProbVerificationSuite

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("verify-prob", help="Check probabilistic layers against Monte-Carlo oracles")
    parser.add_argument("--seed", type=seed_int, required=True)
    parser.add_argument("--samples", type=positive_int, default=Tolerances.LAYER_ORACLE_SAMPLES,
                        help="oracle draws per layer configuration")
    parser.add_argument("--configs", type=positive_int, default=Tolerances.LAYER_ORACLE_CONFIGS)
    parser.add_argument("--subset-samples", type=positive_int, default=Tolerances.SUBSET_ORACLE_SAMPLES)
    parser.add_argument("--sabotage", choices=SABOTAGE_MODES, default=None,
                        help="inject a known fault; the matching check must fail")
    parser.add_argument("--out", default=None, help="verification report JSON")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    suite = ProbVerificationSuite(args.seed, args.samples, args.configs, args.subset_samples, args.sabotage)
    started = time.perf_counter()
    results = suite.run_all()
    elapsed = time.perf_counter() - started
    for detail in results["details"]:
        log = logger.info if detail["status"] == "PASS" else logger.error
        log("%-36s %s", detail["test"], detail["status"])
    logger.info("Clamped variances: %s", results["clamp_counts"])
    if args.out:
        write_payload(args.out, "verification", results, args.seed, args_config(args), None,
                      {"verify": elapsed})
    if results["tests_failed"]:
        raise VerificationFailed(f"{results['tests_failed']} of {results['tests_run']} moment checks failed")
    return ExitCodes.OK

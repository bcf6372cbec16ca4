"""
benchmark: score every explainer against exact Shapley values

Writes a CSV table (one row per estimator and baseline, '#' header lines
with seed, model checksum and tool version) and a JSON file with the
per-example details.
"""

import argparse
import logging
import time

import pandas as pd

from commands.common import (args_config, build_baseline, int_list, load_inputs,
                             positive_int, seed_int, write_payload)
from utils import __version__
from utils.errors import VerificationFailed
from utils.evalbench import (EstimatorSpec, benchmark, convergence_curve,
                             default_estimators, ground_truth, replicate_src,
                             trend_checks)
from utils.prob_layers import VARIANCE_MODES
from utils.settings import BenchmarkDefaults, ExitCodes, TOOL_NAME

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("benchmark", help="Compare explainers against exact Shapley values")
    parser.add_argument("--model", required=True, help="model JSON")
    parser.add_argument("--data", required=True, help="dataset whose leading examples are explained")
    parser.add_argument("--seed", type=seed_int, required=True)
    parser.add_argument("--examples", type=positive_int, default=BenchmarkDefaults.EXAMPLES)
    parser.add_argument("--baseline", choices=("zero", "hull", "both"), default="zero")
    parser.add_argument("--hull-data", default=None, help="dataset for the hull template (default: --data)")
    parser.add_argument("--variance-modes", nargs="*", choices=VARIANCE_MODES, default=[],
                        help="extra svehnn rows, one per variance mode")
    parser.add_argument("--replicates", type=int, default=0,
                        help="seed replicates comparing budget-matched sampling with svehnn on SRC")
    parser.add_argument("--convergence", type=int_list, default=None,
                        help="sampling budgets for a convergence curve, e.g. 32,128,512,2000")
    parser.add_argument("--threads", type=positive_int, default=1)
    parser.add_argument("--out-csv", default="benchmark.csv")
    parser.add_argument("--out-json", default="benchmark.json")
    parser.add_argument("--check", action="store_true", help="exit 1 unless the expected trends hold")
    parser.set_defaults(handler=run)


def write_table(path: str, frame: pd.DataFrame, seed: int, model_checksum: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# tool={TOOL_NAME} version={__version__}\n")
        handle.write(f"# seed={seed}\n")
        handle.write(f"# model_checksum={model_checksum}\n")
        frame.to_csv(handle, index=False)
    logger.info("Wrote %s", path)


def run(args: argparse.Namespace) -> int:
    model, dataset = load_inputs(args.model, args.data)
    specs = default_estimators(model.n_features, args.variance_modes)
    kinds = ("zero", "hull") if args.baseline == "both" else (args.baseline,)
    n_examples = min(args.examples, len(dataset))
    if n_examples < args.examples:
        logger.warning("Dataset holds %d examples; benchmarking all of them", n_examples)

    runs, timings = [], {}
    for kind in kinds:
        baseline = build_baseline(kind, dataset, args.hull_data)
        started = time.perf_counter()
        truths = ground_truth(dataset, model, baseline, n_examples, args.threads)
        result = benchmark(dataset, model, specs, baseline, args.seed, n_examples, args.threads, truths)
        if args.replicates > 0:
            result.replicates = replicate_src(
                dataset, model, baseline, args.seed, args.replicates, EstimatorSpec("svehnn"),
                EstimatorSpec("sampling", 2 * model.n_features), n_examples, args.threads, truths)
            logger.info("Budget-matched sampling SRC below svehnn in %d of %d replicates",
                        result.replicates["challenger_below_reference"], args.replicates)
        body = result.to_dict()
        if args.convergence:
            curve = convergence_curve(EstimatorSpec("sampling"), args.convergence, dataset, model,
                                      baseline, args.seed, n_examples, args.threads, truths)
            body["convergence"] = [r.row() for r in curve]
        timings[kind] = time.perf_counter() - started
        timings.update({f"{kind}:{label}": seconds for label, seconds in result.timings().items()})
        runs.append((result, body))

    frame = pd.concat([result.to_frame() for result, _ in runs], ignore_index=True)
    write_table(args.out_csv, frame, args.seed, model.checksum())

    checks = []
    if args.check:
        for result, body in runs:
            if result.baseline != "zero":
                continue
            body["checks"] = trend_checks(result)
            checks.extend(body["checks"])
    write_payload(args.out_json, "benchmark", {"runs": [body for _, body in runs]}, args.seed,
                  args_config(args), model.checksum(), timings, args.threads)

    failed = [c for c in checks if not c["passed"]]
    for check in failed:
        logger.error("Check %s failed (value %s)", check["check"], check["value"])
    if failed:
        raise VerificationFailed(f"{len(failed)} of {len(checks)} benchmark checks failed")
    return ExitCodes.OK

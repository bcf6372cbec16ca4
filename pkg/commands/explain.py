"""
explain: attribute one prediction, or summarize a run of consecutive examples
"""

import argparse
import logging
import time

import numpy as np

from commands.common import (args_config, build_baseline, load_inputs,
                             positive_int, require_file, seed_int, write_payload)
from utils.attribution import (ESTIMATORS, BASELINE_KINDS, ExplainerConfig,
                               FeatureSpace, explain, relevance_summary)
from utils.errors import UsageError
from utils.nn_core import HeterogeneousInput, wdpn_forward
from utils.prob_layers import VARIANCE_MODES
from utils.settings import ExitCodes, ExplainerDefaults, derive_seed, read_json

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("explain", help="Explain predictions with one estimator")
    parser.add_argument("--model", required=True, help="model JSON")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="dataset to take examples from")
    source.add_argument("--input", help="standalone input JSON {points, tabular}")
    parser.add_argument("--index", type=int, default=0, help="first example index in --data")
    parser.add_argument("--count", type=positive_int, default=1,
                        help="explain this many consecutive examples and write a relevance summary")
    parser.add_argument("--correct-only", action="store_true",
                        help="with --count: keep correctly classified examples only")
    parser.add_argument("--estimator", choices=ESTIMATORS, default="svehnn")
    parser.add_argument("--baseline", choices=BASELINE_KINDS, default="zero")
    parser.add_argument("--hull-data", default=None, help="dataset for the hull template (default: --data)")
    parser.add_argument("--samples", type=positive_int, default=None,
                        help="M: permutations (sampling) or k draws per feature (svehnn-mc)")
    parser.add_argument("--stratified", action="store_true", help="svehnn-mc: even grid of k values")
    parser.add_argument("--variance-mode", choices=VARIANCE_MODES, default=ExplainerDefaults.VARIANCE_MODE)
    parser.add_argument("--seed", type=seed_int, default=0)
    parser.add_argument("--threads", type=positive_int, default=1)
    parser.add_argument("--out", required=True, help="attribution report JSON")
    parser.add_argument("--summary-out", default=None, help="with --count: summary CSV (default: <out>.csv)")
    parser.set_defaults(handler=run)


def _default_samples(estimator: str) -> int:
    if estimator == "svehnn-mc":
        return ExplainerDefaults.SVEHNN_MC_SAMPLES
    return ExplainerDefaults.SAMPLING_PERMUTATIONS


def run(args: argparse.Namespace) -> int:
    model, dataset = load_inputs(args.model, args.data)
    config = ExplainerConfig(n_samples=args.samples or _default_samples(args.estimator), seed=args.seed,
                             variance_mode=args.variance_mode, threads=args.threads,
                             stratified=args.stratified)
    baseline = build_baseline(args.baseline, dataset, args.hull_data)
    column_names = dataset.manifest.column_names if dataset and dataset.manifest.column_names else None
    space = FeatureSpace.of(model, column_names)
    echo = dict(args_config(args), explainer=config.to_dict(), baseline_info=baseline.describe())

    if args.input:
        if args.count > 1:
            raise UsageError("--count needs --data")
        z = HeterogeneousInput.from_dict(read_json(require_file(args.input, "input file")))
        started = time.perf_counter()
        attribution = explain(args.estimator, z, model, baseline, config, space)
        body = {"example": None, "input": z.to_dict(), "attribution": attribution.to_report_dict(z)}
        write_payload(args.out, "explanation", body, args.seed, echo, model.checksum(),
                      {"explain": time.perf_counter() - started}, args.threads)
        return ExitCodes.OK

    stop = args.index + args.count
    if not 0 <= args.index < stop <= len(dataset):
        raise UsageError(f"examples {args.index}..{stop - 1} are outside the dataset of {len(dataset)}")

    started = time.perf_counter()
    if args.count == 1:
        example = dataset.examples[args.index]
        attribution = explain(args.estimator, example.input, model, baseline, config, space)
        body = {"example": args.index, "label": example.label, "input": example.input.to_dict(),
                "attribution": attribution.to_report_dict(example.input)}
        write_payload(args.out, "explanation", body, args.seed, echo, model.checksum(),
                      {"explain": time.perf_counter() - started}, args.threads)
        return ExitCodes.OK

    attributions, rows = [], []
    for index in range(args.index, stop):
        example = dataset.examples[index]
        predicted = int(wdpn_forward(example.input, model) > 0)
        if args.correct_only and predicted != example.label:
            continue
        # seed substream keyed by example index
        example_config = ExplainerConfig(config.n_samples, derive_seed(args.seed, index), config.variance_mode,
                                         config.threads, config.stratified)
        attribution = explain(args.estimator, example.input, model, baseline, example_config, space)
        attributions.append(attribution)
        rows.append({"example": index, "label": example.label, "predicted": predicted,
                     "f_z": attribution.logit, "f_baseline": attribution.baseline_logit,
                     "shape_total": attribution.shape_total, "evaluations": attribution.evaluations,
                     "values": attribution.values})
    if not attributions:
        raise UsageError("no example left to summarize; drop --correct-only or widen the range")

    summary = relevance_summary(attributions)
    summary_path = args.summary_out or f"{args.out}.csv"
    summary.to_csv(summary_path, index=False)
    body = {"examples": rows, "summary": summary.to_dict(orient="records"),
            "mean_abs_total": float(np.mean([np.abs(a.values).sum() for a in attributions]))}
    write_payload(args.out, "explanations", body, args.seed, echo, model.checksum(),
                  {"explain": time.perf_counter() - started}, args.threads)
    logger.info("Summarized %d examples into %s", len(attributions), summary_path)
    return ExitCodes.OK

"""
Helpers shared by the subcommands: argument validation, loading inputs,
building baselines and writing payload files.
"""

import argparse
import logging
import os
from typing import Any, Dict, Optional

from utils.attribution import BaselineSpec
from utils.datagen import Dataset, read_dataset
from utils.errors import ShapeError, UsageError
from utils.hull import hull_template
from utils.nn_core import WdpnModel, load_model
from utils.settings import SEED_MIN, SEED_MODULUS, build_envelope, write_json

logger = logging.getLogger(__name__)


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text!r} must be at least 1")
    return value


def seed_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if not SEED_MIN <= value < SEED_MODULUS:
        raise argparse.ArgumentTypeError(f"{text!r} does not fit in 64 bits")
    return value


def int_list(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated list of integers")


def require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def load_inputs(model_path: str, data_path: Optional[str]) -> tuple:
    """Model plus optional dataset, checked against each other"""
    model = load_model(require_file(model_path, "model file"))
    dataset = None
    if data_path:
        dataset = read_dataset(require_file(data_path, "dataset"))
        check_compatible(model, dataset)
    return model, dataset


def check_compatible(model: WdpnModel, dataset: Dataset) -> None:
    manifest = dataset.manifest
    if (manifest.K, manifest.D) != (model.n_points, model.n_tabular):
        raise ShapeError(f"dataset has K={manifest.K}, D={manifest.D}; model expects "
                         f"K={model.n_points}, D={model.n_tabular}")


def build_baseline(kind: str, dataset: Optional[Dataset], hull_path: Optional[str] = None) -> BaselineSpec:
    """Zero baseline, or the hull template of the hull dataset (default: the input dataset)"""
    if kind == "zero":
        return BaselineSpec.zero()
    source = read_dataset(require_file(hull_path, "hull dataset")) if hull_path else dataset
    if source is None:
        raise UsageError("the hull baseline needs --data or --hull-data")
    template = hull_template(source.points)
    logger.info("Hull template from %d clouds (%s)", len(source), template.method)
    return BaselineSpec.hull(template)


def write_payload(path: str, key: str, body: Any, seed: Optional[int], config: Dict[str, Any],
                  model_checksum: Optional[str], wall_clock_s: Optional[Dict[str, float]] = None,
                  threads: Optional[int] = None) -> None:
    payload = build_envelope(seed, config, model_checksum, wall_clock_s, threads)
    payload[key] = body
    write_json(path, payload)
    logger.info("Wrote %s", path)


def args_config(args: argparse.Namespace) -> Dict[str, Any]:
    """Echo of the parsed flags, without the dispatch and runtime entries"""
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("handler", "log_level", "threads")}

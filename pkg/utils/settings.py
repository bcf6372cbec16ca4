"""
Shared Settings for the SVEHNN Explanation Toolkit
==================================================

Default values, tolerances and exit codes live in constant classes so every
module and command pulls the same numbers. This module also provides the
small helpers every command needs: logging setup, seed derivation,
checksums and the envelope written around each payload file.
"""

import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from utils import __version__

TOOL_NAME = "svehnn-explain"

T = TypeVar("T")
R = TypeVar("R")

# =============================================================================
# DEFAULTS
# =============================================================================


class ArchitectureDefaults:
    """Network shape used when a command does not override it"""
    HIDDEN_WIDTHS = (32, 64)          # point MLP 3 -> 32 -> 64, latent 64
    BATCHNORM_EPSILON = 1e-5
    BATCHNORM_MOMENTUM = 0.9          # weight kept by the running statistics
    MODEL_FORMAT_VERSION = 1


class TrainingDefaults:
    EPOCHS = 80
    BATCH_SIZE = 32
    LEARNING_RATE = 1e-3
    OPTIMIZER = "adam"
    ADAM_BETAS = (0.9, 0.999)
    ADAM_EPSILON = 1e-8
    VALIDATION_FRACTION = 0.2
    LOG_EVERY = 10


class ExplainerDefaults:
    """Budgets and guards for the explainers"""
    SAMPLING_PERMUTATIONS = 2000
    SVEHNN_MC_SAMPLES = 150
    EXACT_MAX_FEATURES = 24
    COALITION_CHUNK = 4096            # masks per forward batch
    PROB_PASS_CHUNK = 256             # probabilistic passes per batch
    VARIANCE_MODE = "as_written"


class BenchmarkDefaults:
    EXAMPLES = 100
    SAMPLING_CONVERGED = 2000


class Tolerances:
    """Acceptance bands used by the verification suite"""
    STANDARD_ERRORS = 3.0
    LAYER_ORACLE_SAMPLES = 1_000_000
    LAYER_ORACLE_CONFIGS = 20
    SUBSET_ORACLE_SAMPLES = 50_000
    GAUSSIAN_APPROXIMATION = 0.05
    DEGENERATE_FIDELITY = 1e-9


class ExitCodes:
    OK = 0
    CHECK_FAILED = 1
    USAGE = 2
    REFUSED = 3


# =============================================================================
# LOGGING
# =============================================================================

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """
    Install one stderr handler on the root logger

    Args:
        level: Logging level name (DEBUG, INFO, WARNING, ...)
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level.upper())


# =============================================================================
# SEEDS AND CHECKSUMS
# =============================================================================


SEED_MIN = -(2 ** 63)
SEED_MODULUS = 2 ** 64


def as_seed(seed: int) -> int:
    """Map any 64-bit integer, signed or not, onto the non-negative range numpy accepts"""
    return int(seed) % SEED_MODULUS


def derive_seed(seed: int, *keys: int) -> int:
    """
    Derive an independent 64-bit seed for a sub-task

    The result depends only on the root seed and the keys, never on the order
    in which workers ask for it.

    Args:
        seed: Root seed of the run
        keys: Integer path identifying the sub-task (example, estimator, ...)

    Returns:
        Derived seed as a Python int
    """
    sequence = np.random.SeedSequence(as_seed(seed), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def to_jsonable(value: Any) -> Any:
    """Convert numpy containers and scalars into plain JSON values"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else None
    return value


def canonical_json(payload: Any) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, separators=(",", ":"))


def checksum(payload: Any) -> str:
    """SHA-256 over the canonical JSON rendering of a payload"""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def array_checksum(values: Sequence[np.ndarray]) -> str:
    """SHA-256 over the raw float64 bytes of a list of arrays"""
    digest = hashlib.sha256()
    for array in values:
        digest.update(np.ascontiguousarray(array, dtype=np.float64).tobytes())
    return digest.hexdigest()


# =============================================================================
# OUTPUT ENVELOPE
# =============================================================================


def build_envelope(seed: Optional[int], config: Dict[str, Any],
                   model_checksum: Optional[str],
                   wall_clock_s: Optional[Dict[str, float]] = None,
                   threads: Optional[int] = None) -> Dict[str, Any]:
    """
    Header embedded in every payload file

    Everything except ``volatile`` is a pure function of the inputs, so two
    identical runs differ only inside that one field.

    Args:
        seed: Root seed of the run
        config: Echo of the effective configuration
        model_checksum: Checksum of the model being used, if any
        wall_clock_s: Optional timings, kept with the timestamp
        threads: Worker count; results never depend on it

    Returns:
        Envelope dictionary
    """
    return {
        "tool": TOOL_NAME,
        "tool_version": __version__,
        "seed": seed,
        "config": to_jsonable(config),
        "model_checksum": model_checksum,
        "volatile": {
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "wall_clock_s": to_jsonable(wall_clock_s or {}),
            "threads": threads,
        },
    }


def write_json(path: str, payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(to_jsonable(payload), handle, indent=2)
        handle.write("\n")


def read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


# =============================================================================
# PARALLEL EXECUTION
# =============================================================================


def ordered_map(func: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """
    Apply ``func`` to every item, possibly on several threads

    Results come back in item order, so aggregation never depends on the
    worker count or on scheduling.

    Args:
        func: Pure function of one work item
        items: Work items, split by the caller into fixed-size chunks
        threads: Number of worker threads (1 runs inline)

    Returns:
        List of results aligned with ``items``
    """
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def chunk_ranges(total: int, size: int) -> List[Tuple[int, int]]:
    return [(start, min(start + size, total)) for start in range(0, total, size)]

"""
Synthetic Datasets
==================

Generators for the two tasks the toolkit is exercised on, plus dataset IO.

- ``generate_xi``: 16-point clouds of the characters X (label 1) and I
  (label 0) in the z = 0 plane, no tabular data
- ``generate_hetero``: sphere (label 0) versus ellipsoid (label 1) surface
  samples with a tabular vector of class-shifted and pure-noise columns

Files are newline-delimited JSON: the manifest on the first line, then one
record ``{points, tabular, label}`` per line. Python's float repr round-trips
exactly, so write then read reproduces every array bitwise.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np

from utils import __version__
from utils.errors import (DatasetIntegrityError, DatasetParseError,
                          DomainError)
from utils.nn_core import HeterogeneousInput
from utils.settings import TOOL_NAME, array_checksum, as_seed

logger = logging.getLogger(__name__)

XI_POINTS = 16
ELLIPSOID_RADII = (1.0, 0.7, 0.5)
INFORMATIVE_SHIFT = 0.75
SURFACE_NOISE = 0.02
DATASET_FORMAT_VERSION = 1


# =============================================================================
# TYPES
# =============================================================================


@dataclass(frozen=True, eq=False)
class LabeledExample:
    input: HeterogeneousInput
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DomainError(f"label must be 0 or 1, got {self.label!r}")

    def to_record(self) -> Dict[str, Any]:
        return {"points": self.input.points.tolist(), "tabular": self.input.tabular.tolist(),
                "label": int(self.label)}


@dataclass
class DatasetManifest:
    """Header line of a dataset file"""
    n_examples: int
    K: int
    D: int
    seed: Optional[int]
    generator: str
    class_balance: List[int]
    params: Dict[str, Any] = field(default_factory=dict)
    informative: List[bool] = field(default_factory=list)
    column_names: List[str] = field(default_factory=list)
    format_version: int = DATASET_FORMAT_VERSION
    tool: str = TOOL_NAME
    tool_version: str = __version__

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "DatasetManifest":
        try:
            return cls(
                n_examples=int(payload["n_examples"]), K=int(payload["K"]), D=int(payload["D"]),
                seed=payload.get("seed"), generator=str(payload["generator"]),
                class_balance=[int(c) for c in payload["class_balance"]],
                params=dict(payload.get("params", {})),
                informative=[bool(f) for f in payload.get("informative", [])],
                column_names=[str(c) for c in payload.get("column_names", [])],
                format_version=int(payload.get("format_version", DATASET_FORMAT_VERSION)),
                tool=str(payload.get("tool", TOOL_NAME)),
                tool_version=str(payload.get("tool_version", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetIntegrityError(f"manifest is missing or has a malformed field: {exc}") from exc


@dataclass
class Dataset:
    manifest: DatasetManifest
    examples: List[LabeledExample]

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def points(self) -> np.ndarray:
        return np.stack([e.input.points for e in self.examples])

    @property
    def tabular(self) -> np.ndarray:
        return np.stack([e.input.tabular for e in self.examples]).reshape(len(self), self.manifest.D)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    def checksum(self) -> str:
        return array_checksum([self.points, self.tabular, self.labels])


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    positives = (n + 1) // 2
    labels = np.array([1] * positives + [0] * (n - positives), dtype=np.int64)
    return rng.permutation(labels)


def _column_names(d: int) -> List[str]:
    return [f"x{i}" for i in range(d)]


# =============================================================================
# X / I CHARACTERS
# =============================================================================


def xi_template(label: int) -> np.ndarray:
    """
    Jitter-free character of 16 points in stroke-major order

    X: 8 evenly spaced points on each diagonal of [-1, 1]^2.
    I: 16 evenly spaced points on the segment x = 0.
    """
    if label == 1:
        t = (2.0 * np.arange(8) - 7.0) / 7.0
        strokes = [np.stack([t, t], axis=1), np.stack([t, -t], axis=1)]
        planar = np.concatenate(strokes)
    else:
        y = (2.0 * np.arange(XI_POINTS) - 15.0) / 15.0
        planar = np.stack([np.zeros(XI_POINTS), y], axis=1)
    return np.concatenate([planar, np.zeros((XI_POINTS, 1))], axis=1)


def generate_xi(n: int, seed: int, jitter: float = 0.05) -> Dataset:
    """
    The X-versus-I classification task

    Args:
        n: Number of examples (at least 2)
        seed: Generator seed
        jitter: Standard deviation of the Gaussian noise added to x and y

    Returns:
        Dataset with K=16, D=0 and ceil(n/2) X examples
    """
    if n < 2:
        raise DomainError("the X/I task needs at least two examples")
    if jitter < 0:
        raise DomainError("jitter must be non-negative")
    rng = np.random.default_rng(as_seed(seed))
    labels = _balanced_labels(n, rng)
    examples = []
    for label in labels:
        cloud = xi_template(int(label))
        if jitter > 0:
            cloud[:, :2] += rng.normal(0.0, jitter, size=(XI_POINTS, 2))
        examples.append(LabeledExample(HeterogeneousInput(cloud, np.zeros(0)), int(label)))
    manifest = DatasetManifest(
        n_examples=n, K=XI_POINTS, D=0, seed=seed, generator="xi",
        class_balance=[int(np.sum(labels == 0)), int(np.sum(labels == 1))],
        params={"jitter": jitter})
    logger.info("Generated %d X/I clouds (seed=%d, jitter=%.3f)", n, seed, jitter)
    return Dataset(manifest, examples)


# =============================================================================
# HETEROGENEOUS TASK
# =============================================================================


def _surface_samples(rng: np.random.Generator, k: int, radii: Sequence[float]) -> np.ndarray:
    directions = rng.normal(size=(k, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * np.asarray(radii) + rng.normal(0.0, SURFACE_NOISE, size=(k, 3))


def generate_hetero(n: int, k: int, d: int, seed: int,
                    n_informative: Optional[int] = None) -> Dataset:
    """
    Point cloud plus tabular task with planted signal

    Args:
        n: Number of examples (at least 2)
        k: Points per cloud (at least 4)
        d: Tabular columns (at least 1)
        seed: Generator seed
        n_informative: Leading columns shifted by +-0.75 with the class;
            defaults to d // 2, the rest are N(0, 1) noise

    Returns:
        Dataset whose manifest flags the informative columns
    """
    if n < 2 or k < 4 or d < 1:
        raise DomainError("the heterogeneous task needs n >= 2, K >= 4 and D >= 1")
    n_informative = d // 2 if n_informative is None else n_informative
    if not 0 <= n_informative <= d:
        raise DomainError(f"n_informative must lie in [0, {d}]")
    rng = np.random.default_rng(as_seed(seed))
    labels = _balanced_labels(n, rng)
    informative = np.arange(d) < n_informative
    examples = []
    for label in labels:
        radii = ELLIPSOID_RADII if label == 1 else (1.0, 1.0, 1.0)
        cloud = _surface_samples(rng, k, radii)
        shift = INFORMATIVE_SHIFT if label == 1 else -INFORMATIVE_SHIFT
        tabular = rng.normal(size=d) + np.where(informative, shift, 0.0)
        examples.append(LabeledExample(HeterogeneousInput(cloud, tabular), int(label)))
    manifest = DatasetManifest(
        n_examples=n, K=k, D=d, seed=seed, generator="hetero",
        class_balance=[int(np.sum(labels == 0)), int(np.sum(labels == 1))],
        params={"ellipsoid_radii": list(ELLIPSOID_RADII), "shift": INFORMATIVE_SHIFT,
                "surface_noise": SURFACE_NOISE},
        informative=informative.tolist(), column_names=_column_names(d))
    logger.info("Generated %d heterogeneous examples (K=%d, D=%d, %d informative)", n, k, d, n_informative)
    return Dataset(manifest, examples)


# =============================================================================
# IO
# =============================================================================


def write_dataset(path: str, dataset: Dataset) -> None:
    """
    Write the manifest line followed by one record per line

    Raises:
        DatasetIntegrityError: empty dataset or manifest/record mismatch
    """
    if len(dataset) == 0:
        raise DatasetIntegrityError("refusing to write an empty dataset")
    manifest = dataset.manifest
    if manifest.n_examples != len(dataset):
        raise DatasetIntegrityError(f"manifest declares {manifest.n_examples} examples, got {len(dataset)}")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(asdict(manifest), sort_keys=True) + "\n")
        for example in dataset.examples:
            handle.write(json.dumps(example.to_record(), separators=(",", ":")) + "\n")


def _parse_line(text: str, number: int) -> Dict[str, Any]:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(exc.msg, number, exc.pos) from exc
    if not isinstance(payload, dict):
        raise DatasetParseError("expected a JSON object", number, 0)
    return payload


def _iter_lines(path: str) -> Iterator[tuple]:
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    lines = text.split("\n")
    complete = text.endswith("\n")
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        is_last = number == len(lines)
        yield number, line, is_last and not complete


def _record_to_example(record: Dict[str, Any], manifest: DatasetManifest, number: int) -> LabeledExample:
    try:
        example = LabeledExample(
            HeterogeneousInput(record["points"], record.get("tabular", [])), int(record["label"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetIntegrityError(f"line {number}: malformed record ({exc})") from exc
    if example.input.n_points != manifest.K or example.input.n_tabular != manifest.D:
        raise DatasetIntegrityError(
            f"line {number}: record has K={example.input.n_points}, D={example.input.n_tabular}; "
            f"manifest declares K={manifest.K}, D={manifest.D}")
    return example


def read_dataset(path: str) -> Dataset:
    """
    Read a dataset file and check it against its manifest

    Raises:
        FileNotFoundError: the path does not exist
        DatasetParseError: a line is not valid JSON (line and offset attached)
        DatasetIntegrityError: truncation, wrong counts or shapes
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"dataset not found: {path}")
    manifest: Optional[DatasetManifest] = None
    examples: List[LabeledExample] = []
    for number, line, unterminated in _iter_lines(path):
        try:
            payload = _parse_line(line, number)
        except DatasetParseError:
            if unterminated:
                raise DatasetIntegrityError(f"{path} is truncated inside line {number}")
            raise
        if manifest is None:
            manifest = DatasetManifest.from_dict(payload)
            continue
        examples.append(_record_to_example(payload, manifest, number))
    if manifest is None:
        raise DatasetIntegrityError(f"{path} is empty")
    if len(examples) != manifest.n_examples:
        raise DatasetIntegrityError(
            f"{path}: manifest declares {manifest.n_examples} examples, file holds {len(examples)}")
    balance = [sum(e.label == 0 for e in examples), sum(e.label == 1 for e in examples)]
    if balance != manifest.class_balance:
        raise DatasetIntegrityError(f"{path}: class balance {balance} does not match the manifest")
    logger.debug("Read %d examples from %s", len(examples), path)
    return Dataset(manifest, examples)

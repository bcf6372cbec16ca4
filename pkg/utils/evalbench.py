"""
Estimator Benchmark
===================

Metrics comparing an attribution against the exact Shapley values, and the
runner that scores every configured explainer on the same examples against
the same ground truth.

- MSE over features
- SRC: Spearman correlation of the signed values, ties get average ranks
- NDCG: features ranked by |estimate|, gains are |true value|
"""

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from utils.attribution import (Attribution, BaselineSpec, ExplainerConfig,
                               FeatureSpace, exact_shapley, explain)
from utils.datagen import Dataset
from utils.errors import DomainError, ExplanationRefused, ShapeError, SvehnnError
from utils.nn_core import WdpnModel
from utils.settings import (BenchmarkDefaults, ExplainerDefaults,
                            array_checksum, derive_seed, ordered_map)

logger = logging.getLogger(__name__)

ValuesLike = Union[Attribution, np.ndarray, Sequence[float]]


# =============================================================================
# METRICS
# =============================================================================


def _pair(est: ValuesLike, truth: ValuesLike) -> Tuple[np.ndarray, np.ndarray]:
    a = est.values if isinstance(est, Attribution) else np.asarray(est, dtype=np.float64)
    b = truth.values if isinstance(truth, Attribution) else np.asarray(truth, dtype=np.float64)
    a, b = a.reshape(-1), b.reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"estimate has {a.shape[0]} values, truth has {b.shape[0]}")
    if a.shape[0] == 0:
        raise DomainError("metrics need at least one feature")
    return a, b


def mse(est: ValuesLike, truth: ValuesLike) -> float:
    a, b = _pair(est, truth)
    return float(np.mean((a - b) ** 2))


def spearman(est: ValuesLike, truth: ValuesLike) -> Optional[float]:
    """
    Spearman rank correlation on signed values

    Returns:
        Correlation in [-1, 1], or None when either ranking is constant
    """
    a, b = _pair(est, truth)
    if a.shape[0] < 2:
        raise DomainError("Spearman correlation needs at least two features")
    ra, rb = rankdata(a), rankdata(b)
    if np.ptp(ra) == 0 or np.ptp(rb) == 0:
        return None
    value = float(np.corrcoef(ra, rb)[0, 1])
    return float(np.clip(value, -1.0, 1.0))


def ndcg(est: ValuesLike, truth: ValuesLike) -> float:
    """
    Normalized discounted cumulative gain with |value| as importance

    An all-zero truth has no ideal ordering; it scores 1 by convention.
    """
    a, b = _pair(est, truth)
    gains = np.abs(b)
    discounts = 1.0 / np.log2(np.arange(2, a.shape[0] + 2))
    ideal = float(np.sort(gains)[::-1] @ discounts)
    if ideal == 0.0:
        return 1.0
    order = np.argsort(-np.abs(a), kind="stable")
    return float(np.clip((gains[order] @ discounts) / ideal, 0.0, 1.0))


# =============================================================================
# TYPES
# =============================================================================


@dataclass(frozen=True)
class EstimatorSpec:
    """One benchmark row: an explainer id with its budget and variance mode"""
    estimator: str
    n_samples: int = ExplainerDefaults.SAMPLING_PERMUTATIONS
    variance_mode: str = ExplainerDefaults.VARIANCE_MODE
    name: Optional[str] = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.estimator in ("sampling", "svehnn-mc"):
            return f"{self.estimator}@{self.n_samples}"
        if self.estimator == "svehnn" and self.variance_mode != ExplainerDefaults.VARIANCE_MODE:
            return f"svehnn[{self.variance_mode}]"
        return self.estimator

    @property
    def stochastic(self) -> bool:
        return self.estimator in ("sampling", "svehnn-mc")

    @property
    def seed_key(self) -> int:
        """Stable key for the seed substream, independent of row position"""
        return int(hashlib.sha256(self.label.encode("utf-8")).hexdigest()[:8], 16)


@dataclass
class MetricReport:
    estimator: str
    mse: float
    src: Optional[float]
    ndcg: float
    ne: int
    mse_median: float = float("nan")
    src_median: Optional[float] = None
    ndcg_median: float = float("nan")
    src_excluded: int = 0
    ndcg_flagged: int = 0
    wall_clock_s: float = 0.0
    per_example: List[Dict[str, Any]] = field(default_factory=list)

    def row(self) -> Dict[str, Any]:
        return {"estimator": self.estimator, "MSE": self.mse, "SRC": self.src, "NDCG": self.ndcg,
                "NE": self.ne, "MSE_median": self.mse_median, "SRC_median": self.src_median,
                "NDCG_median": self.ndcg_median, "SRC_excluded": self.src_excluded}


@dataclass
class BenchmarkRun:
    dataset_id: str
    model_checksum: str
    baseline: str
    reports: List[MetricReport]
    seed: int
    n_examples: int
    ground_truth_checksum: str
    src_convention: str = "signed"
    replicates: Optional[Dict[str, Any]] = None

    def report(self, label: str) -> MetricReport:
        for report in self.reports:
            if report.estimator == label:
                return report
        raise KeyError(label)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.row() for r in self.reports])
        frame.insert(0, "baseline", self.baseline)
        return frame

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "model_checksum": self.model_checksum,
            "baseline": self.baseline,
            "seed": self.seed,
            "n_examples": self.n_examples,
            "ground_truth_checksum": self.ground_truth_checksum,
            "src_convention": self.src_convention,
            "rows": [dict(r.row(), ndcg_flagged=r.ndcg_flagged,
                          per_example=r.per_example) for r in self.reports],
            "replicates": self.replicates,
        }

    def timings(self) -> Dict[str, float]:
        return {r.estimator: r.wall_clock_s for r in self.reports}


def default_estimators(n_features: int,
                       extra_variance_modes: Sequence[str] = ()) -> List[EstimatorSpec]:
    """
    The standard rows: exact, converged sampling, budget-matched sampling,
    occlusion and svehnn, plus one svehnn row per extra variance mode

    Budget-matched sampling uses M = 2 |F| permutations, so its M |F|
    evaluations equal the 2 |F|^2 probabilistic passes of svehnn.
    """
    specs = [
        EstimatorSpec("exact"),
        EstimatorSpec("sampling", BenchmarkDefaults.SAMPLING_CONVERGED),
        EstimatorSpec("sampling", 2 * n_features),
        EstimatorSpec("occlusion"),
        EstimatorSpec("svehnn"),
    ]
    for mode in extra_variance_modes:
        if mode != ExplainerDefaults.VARIANCE_MODE:
            specs.append(EstimatorSpec("svehnn", variance_mode=mode))
    return specs


# =============================================================================
# RUNNER
# =============================================================================


def ground_truth(dataset: Dataset, model: WdpnModel, baseline: BaselineSpec,
                 n_examples: int, threads: int = 1) -> List[Attribution]:
    """Exact Shapley values for the first ``n_examples`` examples"""
    if model.n_features > ExplainerDefaults.EXACT_MAX_FEATURES:
        raise ExplanationRefused(
            f"the benchmark needs exact ground truth; {model.n_features} features exceed the "
            f"limit of {ExplainerDefaults.EXACT_MAX_FEATURES}")
    if not 1 <= n_examples <= len(dataset):
        raise DomainError(f"need 1 <= examples <= {len(dataset)}, got {n_examples}")
    space = _feature_space(dataset, model)
    return ordered_map(lambda i: exact_shapley(dataset.examples[i].input, model, baseline,
                                               feature_space=space),
                       list(range(n_examples)), threads)


def _feature_space(dataset: Dataset, model: WdpnModel) -> FeatureSpace:
    names = dataset.manifest.column_names or None
    return FeatureSpace.of(model, names)


def _truth_checksum(truths: Sequence[Attribution]) -> str:
    return array_checksum([t.values for t in truths])


def _score(spec: EstimatorSpec, estimates: Sequence[Attribution], truths: Sequence[Attribution],
           wall_clock: float) -> MetricReport:
    per_example = []
    for index, (est, truth) in enumerate(zip(estimates, truths)):
        per_example.append({"example": index, "mse": mse(est, truth), "src": spearman(est, truth),
                            "ndcg": ndcg(est, truth), "ne": est.evaluations,
                            "ndcg_flagged": bool(np.all(truth.values == 0))})
    mses = np.array([p["mse"] for p in per_example])
    srcs = np.array([p["src"] for p in per_example if p["src"] is not None])
    ndcgs = np.array([p["ndcg"] for p in per_example])
    excluded = len(per_example) - srcs.shape[0]
    if excluded:
        logger.warning("%s: SRC undefined on %d example(s), excluded from the mean", spec.label, excluded)
    counts = {p["ne"] for p in per_example}
    if len(counts) != 1:
        raise DomainError(f"{spec.label}: evaluation count varies across examples: {sorted(counts)}")
    return MetricReport(
        estimator=spec.label, mse=float(mses.mean()),
        src=float(srcs.mean()) if srcs.size else None, ndcg=float(ndcgs.mean()), ne=counts.pop(),
        mse_median=float(np.median(mses)), src_median=float(np.median(srcs)) if srcs.size else None,
        ndcg_median=float(np.median(ndcgs)), src_excluded=excluded,
        ndcg_flagged=sum(p["ndcg_flagged"] for p in per_example), wall_clock_s=wall_clock,
        per_example=per_example)


def run_estimator(spec: EstimatorSpec, dataset: Dataset, model: WdpnModel, baseline: BaselineSpec,
                  n_examples: int, seed: int, threads: int = 1, replicate: int = 0) -> List[Attribution]:
    """
    One estimator on the first ``n_examples`` examples

    Example i draws from the substream (seed, i, spec key, replicate), so the
    result does not depend on the row order or on the thread count.
    """
    space = _feature_space(dataset, model)

    def one(index: int) -> Attribution:
        config = ExplainerConfig(n_samples=spec.n_samples,
                                 seed=derive_seed(seed, index, spec.seed_key, replicate),
                                 variance_mode=spec.variance_mode)
        try:
            return explain(spec.estimator, dataset.examples[index].input, model, baseline, config, space)
        except SvehnnError:
            logger.error("%s failed on example %d (baseline %s)", spec.label, index, baseline.kind)
            raise

    return ordered_map(one, list(range(n_examples)), threads)


def benchmark(dataset: Dataset, model: WdpnModel, estimators: Sequence[EstimatorSpec],
              baseline: BaselineSpec, seed: int, n_examples: int = BenchmarkDefaults.EXAMPLES,
              threads: int = 1, truths: Optional[List[Attribution]] = None) -> BenchmarkRun:
    """
    Score every estimator against exact Shapley values on the same examples

    Args:
        dataset: Examples to explain; the first ``n_examples`` are used
        model: Network being explained
        estimators: Rows of the table
        baseline: Baseline shared by every row
        seed: Root seed
        n_examples: Size of the dataset slice
        threads: Workers across examples
        truths: Precomputed ground truth to reuse

    Returns:
        BenchmarkRun with one MetricReport per estimator
    """
    n_examples = min(n_examples, len(dataset))
    started = time.perf_counter()
    truths = truths if truths is not None else ground_truth(dataset, model, baseline, n_examples, threads)
    truth_time = time.perf_counter() - started
    checksum_before = _truth_checksum(truths)
    logger.info("Ground truth for %d examples in %.1fs (baseline %s)", n_examples, truth_time, baseline.kind)

    reports = []
    for spec in estimators:
        started = time.perf_counter()
        if spec.estimator == "exact":
            estimates = truths
            elapsed = truth_time
        else:
            estimates = run_estimator(spec, dataset, model, baseline, n_examples, seed, threads)
            elapsed = time.perf_counter() - started
        reports.append(_score(spec, estimates, truths, elapsed))
        logger.info("%-16s MSE %.4f  NE %d  (%.1fs)", spec.label, reports[-1].mse, reports[-1].ne, elapsed)

    if _truth_checksum(truths) != checksum_before:
        raise DomainError("ground truth changed during the benchmark")
    return BenchmarkRun(dataset_id=dataset.checksum(), model_checksum=model.checksum(),
                        baseline=baseline.kind, reports=reports, seed=seed, n_examples=n_examples,
                        ground_truth_checksum=checksum_before)


def convergence_curve(spec: EstimatorSpec, budgets: Sequence[int], dataset: Dataset, model: WdpnModel,
                      baseline: BaselineSpec, seed: int, n_examples: int = BenchmarkDefaults.EXAMPLES,
                      threads: int = 1, truths: Optional[List[Attribution]] = None) -> List[MetricReport]:
    """Metrics of one estimator across ascending budgets with shared ground truth"""
    budgets = [int(b) for b in budgets]
    if not budgets or any(b < 1 for b in budgets) or budgets != sorted(budgets):
        raise DomainError("budgets must be positive and ascending")
    n_examples = min(n_examples, len(dataset))
    truths = truths if truths is not None else ground_truth(dataset, model, baseline, n_examples, threads)
    specs = [EstimatorSpec(spec.estimator, budget, spec.variance_mode) for budget in budgets]
    run = benchmark(dataset, model, specs, baseline, seed, n_examples, threads, truths)
    return run.reports


def replicate_src(dataset: Dataset, model: WdpnModel, baseline: BaselineSpec, seed: int,
                  replicates: int, reference: EstimatorSpec, challenger: EstimatorSpec,
                  n_examples: int, threads: int = 1,
                  truths: Optional[List[Attribution]] = None) -> Dict[str, Any]:
    """
    Re-run a stochastic challenger under ``replicates`` seed substreams

    Returns:
        Per-replicate mean SRC of challenger and reference, and the number of
        replicates where the challenger's SRC is below the reference's
    """
    if replicates < 1:
        raise DomainError("need at least one replicate")
    n_examples = min(n_examples, len(dataset))
    truths = truths if truths is not None else ground_truth(dataset, model, baseline, n_examples, threads)

    def src_of(spec: EstimatorSpec, replicate: int) -> Optional[float]:
        estimates = run_estimator(spec, dataset, model, baseline, n_examples, seed, threads, replicate)
        return _score(spec, estimates, truths, 0.0).src

    fixed = None if reference.stochastic else src_of(reference, 0)
    rows = []
    for replicate in range(replicates):
        rows.append({"replicate": replicate,
                     "reference": src_of(reference, replicate) if reference.stochastic else fixed,
                     "challenger": src_of(challenger, replicate)})
    below = sum(1 for r in rows
                if r["reference"] is not None and r["challenger"] is not None
                and r["challenger"] < r["reference"])
    return {"reference": reference.label, "challenger": challenger.label, "rows": rows,
            "challenger_below_reference": below, "replicates": replicates}


# =============================================================================
# ACCEPTANCE CHECKS
# =============================================================================


def trend_checks(run: BenchmarkRun) -> List[Dict[str, Any]]:
    """
    Qualitative trends a healthy benchmark shows

    svehnn meets absolute quality bars, beats occlusion on ranking, and loses
    to converged sampling on MSE. Budget-matched sampling ranks worse than
    svehnn in at least 4 of 5 replicates when replicates were run.
    """
    svehnn = run.report("svehnn")
    occl = run.report("occlusion")
    converged = run.report(f"sampling@{BenchmarkDefaults.SAMPLING_CONVERGED}")
    src = svehnn.src if svehnn.src is not None else float("-inf")
    checks = [
        ("svehnn_mse", svehnn.mse <= 0.25, svehnn.mse),
        ("svehnn_src", src >= 0.5, svehnn.src),
        ("svehnn_ndcg", svehnn.ndcg >= 0.9, svehnn.ndcg),
        ("occlusion_ndcg_below_svehnn", occl.ndcg < svehnn.ndcg, occl.ndcg),
        ("occlusion_src_below_svehnn", (occl.src if occl.src is not None else float("-inf")) < src, occl.src),
        ("converged_sampling_mse_below_svehnn", converged.mse < svehnn.mse, converged.mse),
    ]
    if run.replicates:
        needed = int(np.ceil(0.8 * run.replicates["replicates"]))
        below = run.replicates["challenger_below_reference"]
        checks.append(("budget_matched_sampling_src_below_svehnn", below >= needed, below))
    return [{"check": name, "passed": bool(ok), "value": value} for name, ok, value in checks]

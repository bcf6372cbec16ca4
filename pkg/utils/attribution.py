"""
Shapley Attribution Explainers
==============================

Four explainers over one feature space (one feature per point, then one per
tabular column) and one baseline abstraction:

- ``exact_shapley``: enumerates all 2^|F| coalitions
- ``shapley_sampling``: permutation sampling with prefix caching
- ``occlusion``: leave-one-out differences
- ``svehnn_full`` / ``svehnn_mc``: expectation differences from the
  probabilistic twin, averaged over every k or over M sampled k values

Every explainer returns an ``Attribution`` in logit units together with the
number of network evaluations it spent.
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import gammaln

from utils.errors import DomainError, ExplanationRefused, ShapeError
from utils.hull import HullTemplate
from utils.nn_core import (BlackBoxModel, EvalCounter, HeterogeneousInput,
                           WdpnModel, sigmoid)
from utils.prob_layers import (VARIANCE_MODES, ProbWdpnModel,
                               expectation_differences, lift_model)
from utils.settings import (ExplainerDefaults, as_seed, chunk_ranges, derive_seed,
                            ordered_map)

logger = logging.getLogger(__name__)

ESTIMATORS = ("exact", "sampling", "occlusion", "svehnn", "svehnn-mc")
BASELINE_KINDS = ("zero", "hull")


# =============================================================================
# FEATURE SPACE AND BASELINES
# =============================================================================


@dataclass(frozen=True)
class FeatureSpace:
    """Point features take ids 0..K-1, tabular columns K..K+D-1"""
    n_points: int
    n_tabular: int
    column_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.n_points < 0 or self.n_tabular < 0 or self.size < 1:
            raise DomainError("feature space needs at least one feature")
        if self.column_names is not None and len(self.column_names) != self.n_tabular:
            raise ShapeError("one column name per tabular feature is required")

    @classmethod
    def of(cls, model: BlackBoxModel, column_names: Optional[Sequence[str]] = None) -> "FeatureSpace":
        return cls(model.n_points, model.n_tabular,
                   None if column_names is None else tuple(column_names))

    @property
    def size(self) -> int:
        return self.n_points + self.n_tabular

    def kind(self, feature_id: int) -> str:
        if not 0 <= feature_id < self.size:
            raise DomainError(f"feature id {feature_id} outside [0, {self.size})")
        return "point" if feature_id < self.n_points else "tabular"

    def label(self, feature_id: int) -> str:
        if self.kind(feature_id) == "point":
            return f"point_{feature_id}"
        column = feature_id - self.n_points
        return self.column_names[column] if self.column_names else f"x{column}"


@dataclass(frozen=True, eq=False)
class BaselineSpec:
    """
    z^bl: points outside a coalition go to the origin (``zero``) or to their
    index-matched template point (``hull``); tabular columns go to zero.
    """
    kind: str = "zero"
    template: Optional[np.ndarray] = None
    method: Optional[str] = None

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise DomainError(f"unknown baseline kind {self.kind!r}; expected one of {BASELINE_KINDS}")
        if self.kind == "hull":
            if self.template is None:
                raise DomainError("hull baseline requested without a template")
            template = np.asarray(self.template, dtype=np.float64)
            if template.ndim != 2 or template.shape[1] != 3:
                raise ShapeError(f"hull template must have shape (K, 3), got {template.shape}")
            object.__setattr__(self, "template", template)

    @classmethod
    def zero(cls) -> "BaselineSpec":
        return cls("zero")

    @classmethod
    def hull(cls, template: Union[HullTemplate, np.ndarray]) -> "BaselineSpec":
        if isinstance(template, HullTemplate):
            return cls("hull", template.points, template.method)
        return cls("hull", template)

    def baseline_input(self, z: HeterogeneousInput) -> HeterogeneousInput:
        if self.kind == "zero":
            points = np.zeros_like(z.points)
        else:
            if self.template.shape[0] != z.n_points:
                raise ShapeError(f"hull template has {self.template.shape[0]} points, input has {z.n_points}")
            points = self.template
        return HeterogeneousInput(points, np.zeros_like(z.tabular))

    def describe(self) -> Dict[str, Any]:
        info: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "hull":
            info["method"] = self.method
        return info


# =============================================================================
# RESULTS AND CONFIGURATION
# =============================================================================


@dataclass(frozen=True)
class ExplainerConfig:
    """
    Monte-Carlo budget and determinism knobs

    ``n_samples`` is M: permutations for sampling, sampled k values per
    feature for svehnn-mc.
    """
    n_samples: int = ExplainerDefaults.SAMPLING_PERMUTATIONS
    seed: int = 0
    variance_mode: str = ExplainerDefaults.VARIANCE_MODE
    threads: int = 1
    stratified: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise DomainError("Monte-Carlo budget M must be at least 1")
        if self.variance_mode not in VARIANCE_MODES:
            raise DomainError(f"unknown variance mode {self.variance_mode!r}")
        if self.threads < 1:
            raise DomainError("thread count must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return {"M": self.n_samples, "seed": self.seed, "variance_mode": self.variance_mode,
                "stratified": self.stratified}


@dataclass(eq=False)
class Attribution:
    """Per-feature relevance in logit units plus provenance"""
    values: np.ndarray
    estimator: str
    baseline: str
    evaluations: int
    logit: float
    baseline_logit: float
    feature_space: FeatureSpace
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.shape[0] != self.feature_space.size:
            raise ShapeError(f"{self.values.shape[0]} values for {self.feature_space.size} features")
        if self.evaluations < 1:
            raise DomainError("an attribution must record at least one evaluation")

    @property
    def completeness_gap(self) -> float:
        return float(np.sum(self.values) - (self.logit - self.baseline_logit))

    @property
    def shape_total(self) -> float:
        """Summed relevance of all point features"""
        return float(np.sum(self.values[:self.feature_space.n_points]))

    def ranking(self) -> np.ndarray:
        """Feature ids by |value| descending, ties to the lowest id"""
        return np.argsort(-np.abs(self.values), kind="stable")

    def records(self, z: Optional[HeterogeneousInput] = None) -> List[Dict[str, Any]]:
        space = self.feature_space
        rows = []
        for feature_id, value in enumerate(self.values):
            row: Dict[str, Any] = {"feature_id": feature_id, "kind": space.kind(feature_id),
                                   "value": float(value)}
            if row["kind"] == "point":
                if z is not None:
                    row["point_coords"] = z.points[feature_id].tolist()
            else:
                row["column_name"] = space.label(feature_id)
            rows.append(row)
        return rows

    def waterfall(self) -> Dict[str, Any]:
        """Cumulative logit from f(z^bl), adding features by decreasing |value|"""
        running = self.baseline_logit
        steps = []
        for feature_id in self.ranking():
            running += float(self.values[feature_id])
            steps.append({"feature_id": int(feature_id), "label": self.feature_space.label(int(feature_id)),
                          "value": float(self.values[feature_id]), "cumulative": running})
        return {"start": self.baseline_logit, "steps": steps, "end": running,
                "logit": self.logit, "shape_total": self.shape_total}

    def to_report_dict(self, z: Optional[HeterogeneousInput] = None) -> Dict[str, Any]:
        return {
            "estimator": self.estimator,
            "baseline": self.baseline,
            "evaluations": self.evaluations,
            "f_z": self.logit,
            "f_baseline": self.baseline_logit,
            "probability": float(sigmoid(self.logit)),
            "baseline_probability": float(sigmoid(self.baseline_logit)),
            "completeness_gap": self.completeness_gap,
            "features": self.records(z),
            "waterfall": self.waterfall(),
            "diagnostics": self.diagnostics,
            "config": self.config,
        }


# =============================================================================
# COALITIONS
# =============================================================================


def _full_mask(n_features: int) -> np.ndarray:
    return np.ones(n_features, dtype=bool)


def _as_mask(coalition: Union[np.ndarray, Sequence[int]], n_features: int) -> np.ndarray:
    coalition = np.asarray(coalition)
    if coalition.dtype == bool:
        if coalition.shape != (n_features,):
            raise ShapeError(f"coalition mask must have length {n_features}")
        return coalition
    mask = np.zeros(n_features, dtype=bool)
    if coalition.size:
        ids = coalition.astype(np.int64).reshape(-1)
        if np.any((ids < 0) | (ids >= n_features)):
            raise DomainError("coalition contains an unknown feature id")
        mask[ids] = True
    return mask


def masked_input(z: HeterogeneousInput, coalition: Union[np.ndarray, Sequence[int]],
                 baseline: BaselineSpec) -> HeterogeneousInput:
    """
    Keep the features of the coalition and take the rest from the baseline

    Args:
        z: Input being explained
        coalition: Boolean mask over K + D features, or a list of feature ids
        baseline: Zero or hull baseline

    Returns:
        The masked input z_S
    """
    reference = baseline.baseline_input(z)
    mask = _as_mask(coalition, z.n_points + z.n_tabular)
    k = z.n_points
    points = np.where(mask[:k, None], z.points, reference.points)
    tabular = np.where(mask[k:], z.tabular, reference.tabular)
    return HeterogeneousInput(points, tabular)


def coalition_value(coalition: Union[np.ndarray, Sequence[int]], z: HeterogeneousInput,
                    model: BlackBoxModel, baseline: BaselineSpec,
                    counter: Optional[EvalCounter] = None) -> float:
    """g(S) = f(z_S) - f(z^bl); costs two evaluations"""
    n_features = model.n_points + model.n_tabular
    masks = np.stack([_as_mask(coalition, n_features), np.zeros(n_features, dtype=bool)])
    logits = model.masked_logits(z, baseline.baseline_input(z), masks, counter)
    return float(logits[0] - logits[1])


def _reference_logits(z: HeterogeneousInput, z_baseline: HeterogeneousInput,
                      model: BlackBoxModel) -> Tuple[float, float]:
    """f(z) and f(z^bl) for reporting; not charged to the explanation"""
    n_features = model.n_points + model.n_tabular
    masks = np.stack([_full_mask(n_features), np.zeros(n_features, dtype=bool)])
    logits = model.masked_logits(z, z_baseline, masks, None)
    return float(logits[0]), float(logits[1])


def _space(model: BlackBoxModel, feature_space: Optional[FeatureSpace]) -> FeatureSpace:
    space = feature_space or FeatureSpace.of(model)
    if (space.n_points, space.n_tabular) != (model.n_points, model.n_tabular):
        raise ShapeError("feature space does not match the model")
    return space


# =============================================================================
# EXACT ENUMERATION
# =============================================================================


def shapley_weights(n_features: int) -> np.ndarray:
    """|S|! (n - |S| - 1)! / n! for |S| = 0..n-1, computed in log space"""
    sizes = np.arange(n_features, dtype=np.float64)
    log_w = gammaln(sizes + 1) + gammaln(n_features - sizes) - gammaln(n_features + 1)
    return np.exp(log_w)


def _popcount(codes: np.ndarray, n_bits: int) -> np.ndarray:
    sizes = np.zeros(codes.shape[0], dtype=np.int64)
    for bit in range(n_bits):
        sizes += (codes >> bit) & 1
    return sizes


def exact_shapley(z: HeterogeneousInput, model: BlackBoxModel, baseline: BaselineSpec,
                  threads: int = 1, feature_space: Optional[FeatureSpace] = None,
                  chunk_size: int = ExplainerDefaults.COALITION_CHUNK) -> Attribution:
    """
    Exact Shapley values by enumerating every coalition once

    All 2^|F| coalition logits are stored in a flat array indexed by bitmask
    (bit j set means feature j is kept). The evaluation count is 2^|F| + 2:
    every coalition plus the f(z) and f(z^bl) bookkeeping passes.

    Raises:
        ExplanationRefused: more than ``EXACT_MAX_FEATURES`` features
    """
    space = _space(model, feature_space)
    n = space.size
    if n > ExplainerDefaults.EXACT_MAX_FEATURES:
        raise ExplanationRefused(
            f"exact enumeration over {n} features needs 2^{n} evaluations; the limit is "
            f"{ExplainerDefaults.EXACT_MAX_FEATURES} features. Use --estimator svehnn or sampling")
    started = time.perf_counter()
    z_baseline = baseline.baseline_input(z)
    counter = EvalCounter()
    total = 1 << n
    codes = np.arange(total, dtype=np.int64)
    bits = np.arange(n, dtype=np.int64)

    def evaluate(bounds: Tuple[int, int]) -> np.ndarray:
        start, stop = bounds
        masks = ((codes[start:stop, None] >> bits) & 1).astype(bool)
        return model.masked_logits(z, z_baseline, masks, counter)

    table = np.concatenate(ordered_map(evaluate, chunk_ranges(total, chunk_size), threads))
    bookkeeping = model.masked_logits(
        z, z_baseline, np.stack([_full_mask(n), np.zeros(n, dtype=bool)]), counter)

    weights = shapley_weights(n)
    sizes = _popcount(codes, n)
    values = np.empty(n)
    for i in range(n):
        without = codes[((codes >> i) & 1) == 0]
        gains = table[without | (1 << i)] - table[without]
        values[i] = np.dot(weights[sizes[without]], gains)

    elapsed = time.perf_counter() - started
    logger.debug("Exact Shapley over %d features in %.3fs", n, elapsed)
    return Attribution(
        values=values, estimator="exact", baseline=baseline.kind, evaluations=counter.count,
        logit=float(bookkeeping[0]), baseline_logit=float(bookkeeping[1]), feature_space=space,
        diagnostics={"coalitions": total, "bookkeeping_evaluations": 2},
        config={})


# =============================================================================
# PERMUTATION SAMPLING
# =============================================================================


def _draw_permutations(n: int, config: ExplainerConfig) -> Tuple[np.ndarray, str]:
    m = config.n_samples
    cycle = math.factorial(n)
    if cycle <= m and m % cycle == 0:
        every = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
        return np.tile(every, (m // cycle, 1)), "exhaustive"
    rng = np.random.default_rng(as_seed(config.seed))
    return rng.permuted(np.tile(np.arange(n, dtype=np.int64), (m, 1)), axis=1), "random"


def shapley_sampling(z: HeterogeneousInput, model: BlackBoxModel, baseline: BaselineSpec,
                     config: ExplainerConfig, feature_space: Optional[FeatureSpace] = None) -> Attribution:
    """
    Permutation-sampling Shapley estimate

    Each of the M permutations costs |F| evaluations: the prefix values are
    cached along the permutation and the empty prefix is f(z^bl), evaluated
    once outside the budget. When M is a multiple of |F|! every permutation
    is visited equally often and the result is exact.
    """
    space = _space(model, feature_space)
    n = space.size
    z_baseline = baseline.baseline_input(z)
    counter = EvalCounter()
    permutations, scheme = _draw_permutations(n, config)
    positions = np.argsort(permutations, axis=1)
    logit, baseline_logit = _reference_logits(z, z_baseline, model)
    prefix_sizes = np.arange(1, n + 1)

    def evaluate(bounds: Tuple[int, int]) -> np.ndarray:
        start, stop = bounds
        block = positions[start:stop]
        # masks[m, t, f]: feature f sits in the first t + 1 positions of permutation m
        masks = block[:, None, :] < prefix_sizes[None, :, None]
        return model.masked_logits(z, z_baseline, masks.reshape(-1, n), counter).reshape(-1, n)

    per_block = max(1, ExplainerDefaults.COALITION_CHUNK // n)
    prefix_values = np.concatenate(
        ordered_map(evaluate, chunk_ranges(config.n_samples, per_block), config.threads))
    previous = np.concatenate(
        [np.full((config.n_samples, 1), baseline_logit), prefix_values[:, :-1]], axis=1)
    contributions = np.zeros_like(prefix_values)
    np.put_along_axis(contributions, permutations, prefix_values - previous, axis=1)

    values = contributions.mean(axis=0)
    if config.n_samples > 1:
        stderr = contributions.std(axis=0, ddof=1) / np.sqrt(config.n_samples)
    else:
        stderr = np.full(n, np.nan)
    return Attribution(
        values=values, estimator="sampling", baseline=baseline.kind, evaluations=counter.count,
        logit=logit, baseline_logit=baseline_logit, feature_space=space,
        diagnostics={"permutation_scheme": scheme, "standard_errors": stderr.tolist(),
                     "reference_evaluations": 1},
        config=config.to_dict())


# =============================================================================
# OCCLUSION
# =============================================================================


def occlusion(z: HeterogeneousInput, model: BlackBoxModel, baseline: BaselineSpec,
              feature_space: Optional[FeatureSpace] = None) -> Attribution:
    """value_i = f(z) - f(z with feature i replaced by its baseline); |F| + 1 evaluations"""
    space = _space(model, feature_space)
    n = space.size
    z_baseline = baseline.baseline_input(z)
    counter = EvalCounter()
    masks = np.ones((n + 1, n), dtype=bool)
    masks[np.arange(1, n + 1), np.arange(n)] = False
    logits = model.masked_logits(z, z_baseline, masks, counter)
    _, baseline_logit = _reference_logits(z, z_baseline, model)
    return Attribution(
        values=logits[0] - logits[1:], estimator="occlusion", baseline=baseline.kind,
        evaluations=counter.count, logit=float(logits[0]), baseline_logit=baseline_logit,
        feature_space=space,
        diagnostics={"reference_evaluations": 1})


# =============================================================================
# PROBABILISTIC EXPLAINERS
# =============================================================================


def _as_wdpn(model: Union[WdpnModel, ProbWdpnModel, BlackBoxModel]) -> Union[WdpnModel, ProbWdpnModel]:
    if not isinstance(model, (WdpnModel, ProbWdpnModel)):
        raise DomainError("svehnn needs a Wide and Deep PointNet; black-box models are not supported")
    return model


def _svehnn(z: HeterogeneousInput, model: Union[WdpnModel, ProbWdpnModel], baseline: BaselineSpec,
            ks_per_feature: np.ndarray, estimator: str, variance_mode: str, threads: int,
            feature_space: Optional[FeatureSpace], config: Dict[str, Any]) -> Attribution:
    prob = lift_model(_as_wdpn(model), variance_mode)
    space = _space(prob.source, feature_space)
    n = space.size
    z_baseline = baseline.baseline_input(z)
    counter = EvalCounter()
    draws = ks_per_feature.shape[1]
    features = np.repeat(np.arange(n), draws)
    report = expectation_differences(z, prob, features, ks_per_feature.reshape(-1),
                                     z_baseline, counter, threads)
    values = report.values.reshape(n, draws).mean(axis=1)
    logit, baseline_logit = _reference_logits(z, z_baseline, prob.source)
    return Attribution(
        values=values, estimator=estimator, baseline=baseline.kind, evaluations=counter.count,
        logit=logit, baseline_logit=baseline_logit, feature_space=space,
        diagnostics={"variance_mode": variance_mode, "clamped_variances": report.clamped,
                     "mean_output_variance": report.mean_output_variance,
                     "reference_evaluations": 2},
        config=config)


def svehnn_full(z: HeterogeneousInput, model: Union[WdpnModel, ProbWdpnModel], baseline: BaselineSpec,
                variance_mode: str = ExplainerDefaults.VARIANCE_MODE, threads: int = 1,
                feature_space: Optional[FeatureSpace] = None) -> Attribution:
    """
    Approximate Shapley values averaging E_k(Delta_i) over every k

    Costs 2 |F|^2 probabilistic passes.
    """
    n = model.n_points + model.n_tabular
    ks = np.tile(np.arange(n, dtype=np.int64), (n, 1))
    return _svehnn(z, model, baseline, ks, "svehnn", variance_mode, threads, feature_space,
                   {"variance_mode": variance_mode})


def svehnn_mc(z: HeterogeneousInput, model: Union[WdpnModel, ProbWdpnModel], baseline: BaselineSpec,
              config: ExplainerConfig, feature_space: Optional[FeatureSpace] = None) -> Attribution:
    """
    Monte-Carlo variant: M draws of k per feature, 2 M |F| passes

    Feature i draws its k values from its own seed substream. With
    ``stratified`` the draws form an even grid over {0, ..., |F| - 1}, so
    M = |F| reproduces ``svehnn_full``.
    """
    n = model.n_points + model.n_tabular
    m = config.n_samples
    if config.stratified:
        grid = (np.arange(m, dtype=np.int64) * n) // m
        ks = np.tile(grid, (n, 1))
    else:
        ks = np.stack([np.random.default_rng(derive_seed(config.seed, i)).integers(0, n, size=m)
                       for i in range(n)])
    return _svehnn(z, model, baseline, ks, "svehnn-mc", config.variance_mode, config.threads,
                   feature_space, config.to_dict())


def explain(estimator: str, z: HeterogeneousInput, model: Union[WdpnModel, BlackBoxModel],
            baseline: BaselineSpec, config: ExplainerConfig,
            feature_space: Optional[FeatureSpace] = None) -> Attribution:
    """Dispatch to one explainer by its id"""
    if estimator == "exact":
        return exact_shapley(z, model, baseline, config.threads, feature_space)
    if estimator == "sampling":
        return shapley_sampling(z, model, baseline, config, feature_space)
    if estimator == "occlusion":
        return occlusion(z, model, baseline, feature_space)
    if estimator == "svehnn":
        return svehnn_full(z, model, baseline, config.variance_mode, config.threads, feature_space)
    if estimator == "svehnn-mc":
        return svehnn_mc(z, model, baseline, config, feature_space)
    raise DomainError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")


# =============================================================================
# DATASET SUMMARY
# =============================================================================


def relevance_summary(attributions: Sequence[Attribution]) -> pd.DataFrame:
    """
    Per-feature averages over many explained examples

    Returns:
        DataFrame with one row per feature plus a final ``shape_total`` row,
        columns feature_id, label, kind, mean_value, mean_abs_value, rank
    """
    if not attributions:
        raise DomainError("nothing to summarize")
    space = attributions[0].feature_space
    if any(a.feature_space != space for a in attributions):
        raise ShapeError("all attributions must share one feature space")
    values = np.stack([a.values for a in attributions])
    frame = pd.DataFrame({
        "feature_id": np.arange(space.size),
        "label": [space.label(i) for i in range(space.size)],
        "kind": [space.kind(i) for i in range(space.size)],
        "mean_value": values.mean(axis=0),
        "mean_abs_value": np.abs(values).mean(axis=0),
    })
    order = np.argsort(-frame["mean_abs_value"].to_numpy(), kind="stable")
    ranks = np.empty(space.size, dtype=np.int64)
    ranks[order] = np.arange(1, space.size + 1)
    frame["rank"] = ranks
    shape_totals = values[:, :space.n_points].sum(axis=1)
    total_row = pd.DataFrame([{
        "feature_id": -1, "label": "shape_total", "kind": "point_group",
        "mean_value": float(shape_totals.mean()), "mean_abs_value": float(np.abs(shape_totals).mean()),
        "rank": 0,
    }])
    return pd.concat([frame, total_row], ignore_index=True)

"""
Probabilistic Wide and Deep PointNet
====================================

The probabilistic twin of a trained WDPN. It takes the same parameters, does
no re-training, and pushes independent per-unit Gaussians through the
network. Drawing a random coalition S of fixed size k turns every first-layer
unit into a random variable. Its moments come from sampling theory, and
moment-matched ReLU, batch-norm, max-pool and linear layers carry them to
the logit. One pass therefore estimates E_k[f(z_S; z_bl)], and two passes
(feature i forced in, then forced out) estimate E_k(Delta_i).

Variance modes for point features:

- ``as_written``: the per-coordinate sampling variance
  k (N - k) / (N - 1) [ (1/N) sum_l (dp_l W_lm)^2 - (h_m / N)^2 ]
- ``bernoulli_point``: whole-point inclusion, pi (1 - pi) (h - h_bl)^2

N is the pool of features whose membership is random (|F| when nothing is
forced, |F| - 1 when one feature is forced in or out) and pi = k / N.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erfc

from utils.errors import DomainError, ShapeError
from utils.nn_core import (BatchNormParams, DenseLayerParams, EvalCounter,
                           HeterogeneousInput, WdpnModel)
from utils.settings import ExplainerDefaults, chunk_ranges, ordered_map

logger = logging.getLogger(__name__)

VARIANCE_MODES = ("as_written", "bernoulli_point")

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / _SQRT2)


def normal_pdf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # x * x may overflow to inf; exp(-inf) is the correct 0
    with np.errstate(over="ignore"):
        return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


# =============================================================================
# TYPES
# =============================================================================


@dataclass(frozen=True, eq=False)
class GaussianVector:
    """Independent per-unit Gaussians: elementwise mean and variance"""
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        variance = np.asarray(self.variance, dtype=np.float64)
        if mean.shape != variance.shape:
            raise ShapeError(f"mean {mean.shape} and variance {variance.shape} differ in shape")
        if not np.all(np.isfinite(variance)) or np.any(variance < 0):
            raise DomainError("variances must be finite and non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @classmethod
    def deterministic(cls, values: np.ndarray) -> "GaussianVector":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.zeros_like(values))


@dataclass(frozen=True, eq=False)
class ProbWdpnModel:
    """Probabilistic twin sharing the parameters of a deterministic WDPN"""
    source: WdpnModel
    variance_mode: str = ExplainerDefaults.VARIANCE_MODE

    @property
    def n_points(self) -> int:
        return self.source.n_points

    @property
    def n_tabular(self) -> int:
        return self.source.n_tabular

    @property
    def n_features(self) -> int:
        return self.source.n_features


@dataclass(frozen=True)
class SubsetSpec:
    """
    Distribution over coalitions: S uniform among size-k subsets of the pool

    The pool is every feature except ``forced_in`` (always present) and
    ``forced_out`` (always replaced by its baseline).
    """
    k: int
    forced_in: Optional[int] = None
    forced_out: Optional[int] = None

    def pool_size(self, n_features: int) -> int:
        return n_features - (self.forced_in is not None) - (self.forced_out is not None)

    def validate(self, n_features: int) -> None:
        for name in ("forced_in", "forced_out"):
            value = getattr(self, name)
            if value is not None and not 0 <= value < n_features:
                raise DomainError(f"{name}={value} is not a feature id in [0, {n_features})")
        if self.forced_in is not None and self.forced_in == self.forced_out:
            raise DomainError("a feature cannot be forced in and out at once")
        pool = self.pool_size(n_features)
        if not 0 <= self.k <= pool:
            raise DomainError(f"subset size k={self.k} outside [0, {pool}]")


@dataclass
class LogitMoments:
    """Moments of the logit for one subset distribution"""
    mean: float
    variance: float
    clamped: int = 0


@dataclass
class PropagationReport:
    """Batch of expectation differences plus diagnostics"""
    values: np.ndarray
    clamped: int
    mean_output_variance: float
    passes: int
    diagnostics: Dict[str, float] = field(default_factory=dict)


def lift_model(model: Union[WdpnModel, ProbWdpnModel],
               variance_mode: str = ExplainerDefaults.VARIANCE_MODE) -> ProbWdpnModel:
    """
    Build the probabilistic twin of a model without touching its parameters

    Args:
        model: Deterministic model, or an existing twin whose source is reused
        variance_mode: ``as_written`` or ``bernoulli_point``

    Returns:
        ProbWdpnModel sharing the very same parameter arrays
    """
    if variance_mode not in VARIANCE_MODES:
        raise DomainError(f"unknown variance mode {variance_mode!r}; expected one of {VARIANCE_MODES}")
    source = model.source if isinstance(model, ProbWdpnModel) else model
    return ProbWdpnModel(source=source, variance_mode=variance_mode)


# =============================================================================
# MOMENT-MATCHED LAYERS (array level)
# =============================================================================


def _relu_moments(mean: np.ndarray, variance: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    std = np.sqrt(variance)
    random = std > 0
    safe_std = np.where(random, std, 1.0)
    a = np.where(random, mean / safe_std, 0.0)
    cdf = normal_cdf(a)
    pdf = normal_pdf(a)
    out_mean = mean * cdf + std * pdf
    second = (mean * mean + variance) * cdf + mean * std * pdf
    out_var = np.maximum(second - out_mean * out_mean, 0.0)
    out_mean = np.where(random, out_mean, np.maximum(mean, 0.0))
    out_var = np.where(random, out_var, 0.0)
    return out_mean, out_var


def _max_moments(mean_a: np.ndarray, var_a: np.ndarray,
                 mean_b: np.ndarray, var_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    theta = np.sqrt(var_a + var_b)
    random = theta > 0
    safe_theta = np.where(random, theta, 1.0)
    d = np.where(random, (mean_a - mean_b) / safe_theta, 0.0)
    cdf = normal_cdf(d)
    cdf_neg = normal_cdf(-d)
    pdf = normal_pdf(d)
    out_mean = mean_a * cdf + mean_b * cdf_neg + theta * pdf
    second = ((mean_a * mean_a + var_a) * cdf + (mean_b * mean_b + var_b) * cdf_neg
              + (mean_a + mean_b) * theta * pdf)
    out_var = np.maximum(second - out_mean * out_mean, 0.0)
    out_mean = np.where(random, out_mean, np.maximum(mean_a, mean_b))
    out_var = np.where(random, out_var, 0.0)
    return out_mean, out_var


def _maxpool_moments(mean: np.ndarray, variance: np.ndarray, axis: int,
                     reverse: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    mean = np.moveaxis(mean, axis, 0)
    variance = np.moveaxis(variance, axis, 0)
    if mean.shape[0] == 0:
        raise DomainError("cannot max-pool over zero points")
    order = range(mean.shape[0] - 1, -1, -1) if reverse else range(mean.shape[0])
    order = list(order)
    acc_mean, acc_var = mean[order[0]], variance[order[0]]
    for j in order[1:]:
        acc_mean, acc_var = _max_moments(acc_mean, acc_var, mean[j], variance[j])
    return acc_mean, acc_var


# =============================================================================
# MOMENT-MATCHED LAYERS (public)
# =============================================================================


def prob_linear(g: GaussianVector, params: DenseLayerParams) -> GaussianVector:
    """
    Linear layer on independent Gaussians

    mean' = W^T mu + b, variance'_m = sum_l W_lm^2 sigma_l^2
    """
    if g.mean.shape[-1] != params.in_dim:
        raise ShapeError(f"linear layer expects {params.in_dim} inputs, got {g.mean.shape[-1]}")
    return GaussianVector(g.mean @ params.weights + params.bias,
                          g.variance @ (params.weights ** 2))


def prob_relu(g: GaussianVector) -> GaussianVector:
    """Moment-matched rectified Gaussian; zero variance reduces to plain ReLU"""
    return GaussianVector(*_relu_moments(g.mean, g.variance))


def prob_batchnorm(g: GaussianVector, params: BatchNormParams) -> GaussianVector:
    if g.mean.shape[-1] != params.width:
        raise ShapeError(f"batch-norm expects {params.width} channels, got {g.mean.shape[-1]}")
    scale, shift = params.affine()
    return GaussianVector(scale * g.mean + shift, scale * scale * g.variance)


def prob_max_pair(a: GaussianVector, b: GaussianVector) -> GaussianVector:
    """
    Gaussian moment matching for max(a, b) of independent Gaussians

    With theta = sqrt(var_a + var_b) and d = (mu_a - mu_b) / theta the first
    two moments are matched exactly; theta = 0 is the deterministic max.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeError("max of Gaussians needs equal shapes")
    return GaussianVector(*_max_moments(a.mean, a.variance, b.mean, b.variance))


def prob_maxpool(per_point: Sequence[GaussianVector], reverse: bool = False) -> GaussianVector:
    """
    Channelwise max over points as a fold of ``prob_max_pair``

    Args:
        per_point: One GaussianVector per point, folded left to right by index
        reverse: Fold right to left instead (diagnostic only)

    Returns:
        Pooled GaussianVector
    """
    if len(per_point) == 0:
        raise DomainError("cannot max-pool an empty sequence")
    mean = np.stack([g.mean for g in per_point])
    variance = np.stack([g.variance for g in per_point])
    return GaussianVector(*_maxpool_moments(mean, variance, axis=0, reverse=reverse))


# =============================================================================
# SUBSET DISTRIBUTIONS
# =============================================================================


def _inclusion_probability(ks: np.ndarray, pools: np.ndarray) -> np.ndarray:
    return np.where(pools > 0, ks / np.maximum(pools, 1), 0.0)


def _first_layer_batch(z: HeterogeneousInput, z_baseline: HeterogeneousInput,
                       dense: DenseLayerParams, ks: np.ndarray, pools: np.ndarray,
                       forced_in: np.ndarray, forced_out: np.ndarray,
                       variance_mode: str) -> Tuple[np.ndarray, np.ndarray, int]:
    """First-layer moments of every point for P subset distributions: (P, K, C)"""
    weights = dense.weights
    h = z.points @ weights
    h_baseline = z_baseline.points @ weights
    delta = h - h_baseline
    pi = _inclusion_probability(ks, pools)[:, None, None]

    mean = dense.bias + h_baseline[None] + pi * delta[None]
    if variance_mode == "as_written":
        squares = ((z.points - z_baseline.points) ** 2) @ (weights ** 2)
        pool = np.maximum(pools, 1)[:, None, None]
        coef = np.where(pools > 1, ks * (pools - ks) / np.maximum(pools - 1, 1), 0.0)[:, None, None]
        variance = coef * (squares[None] / pool - (delta[None] / pool) ** 2)
    else:
        variance = pi * (1.0 - pi) * (delta[None] ** 2)

    k_points = z.n_points
    rows = np.arange(ks.shape[0])
    for forced, source in ((forced_in, h), (forced_out, h_baseline)):
        hit = (forced >= 0) & (forced < k_points)
        if np.any(hit):
            mean[rows[hit], forced[hit]] = dense.bias + source[forced[hit]]
            variance[rows[hit], forced[hit]] = 0.0

    negative = variance < 0
    clamped = int(np.count_nonzero(negative))
    if clamped:
        variance = np.where(negative, 0.0, variance)
    return mean, variance, clamped


def _tabular_batch(z: HeterogeneousInput, z_baseline: HeterogeneousInput, weights: np.ndarray,
                   ks: np.ndarray, pools: np.ndarray, forced_in: np.ndarray,
                   forced_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and variance of the tabular summand of the fusion layer: (P,), (P,)"""
    n_passes = ks.shape[0]
    if z.n_tabular == 0:
        return np.zeros(n_passes), np.zeros(n_passes)
    contribution = weights * (z.tabular - z_baseline.tabular)
    base = float(weights @ z_baseline.tabular)
    inclusion = np.repeat(_inclusion_probability(ks, pools)[:, None], z.n_tabular, axis=1)
    rows = np.arange(n_passes)
    k_points = z.n_points
    for forced, value in ((forced_in, 1.0), (forced_out, 0.0)):
        hit = forced >= k_points
        if np.any(hit):
            inclusion[rows[hit], forced[hit] - k_points] = value
    # one coordinate per feature: the sampling variance is pi (1 - pi) d^2 in both modes
    mean = base + inclusion @ contribution
    variance = (inclusion * (1.0 - inclusion)) @ (contribution ** 2)
    return mean, variance


def _propagate_batch(z: HeterogeneousInput, z_baseline: HeterogeneousInput, model: ProbWdpnModel,
                     ks: np.ndarray, forced_in: np.ndarray, forced_out: np.ndarray,
                     reverse_pool: bool = False) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """
    Run P probabilistic passes

    Returns:
        (point-arm mean incl. fusion bias, tabular mean, total variance, clamp count)
    """
    source = model.source
    n_features = source.n_features
    pools = (n_features - (forced_in >= 0) - (forced_out >= 0)).astype(np.float64)
    ks = ks.astype(np.float64)

    first = source.point_mlp[0]
    mean, variance, clamped = _first_layer_batch(
        z, z_baseline, first.dense, ks, pools, forced_in, forced_out, model.variance_mode)
    for index, layer in enumerate(source.point_mlp):
        if index > 0:
            mean = mean @ layer.dense.weights + layer.dense.bias
            variance = variance @ (layer.dense.weights ** 2)
        if layer.batchnorm is not None:
            scale, shift = layer.batchnorm.affine()
            mean = scale * mean + shift
            variance = scale * scale * variance
        if layer.activation:
            mean, variance = _relu_moments(mean, variance)

    latent_mean, latent_var = _maxpool_moments(mean, variance, axis=1, reverse=reverse_pool)
    latent_w = source.latent_weights
    point_mean = latent_mean @ latent_w + source.fusion.bias[0]
    point_var = latent_var @ (latent_w ** 2)
    tab_mean, tab_var = _tabular_batch(
        z, z_baseline, source.tabular_weights, ks, pools, forced_in, forced_out)
    return point_mean, tab_mean, point_var + tab_var, clamped


def _spec_arrays(specs: Sequence[SubsetSpec], n_features: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    for spec in specs:
        spec.validate(n_features)
    ks = np.array([s.k for s in specs], dtype=np.int64)
    forced_in = np.array([-1 if s.forced_in is None else s.forced_in for s in specs], dtype=np.int64)
    forced_out = np.array([-1 if s.forced_out is None else s.forced_out for s in specs], dtype=np.int64)
    return ks, forced_in, forced_out


def _check_inputs(z: HeterogeneousInput, z_baseline: HeterogeneousInput, model: ProbWdpnModel) -> None:
    for item in (z, z_baseline):
        if item.n_points != model.n_points or item.n_tabular != model.n_tabular:
            raise ShapeError(
                f"input has (K={item.n_points}, D={item.n_tabular}), model expects "
                f"(K={model.n_points}, D={model.n_tabular})")


def subset_first_layer(point: int, params: DenseLayerParams, spec: SubsetSpec,
                       z: HeterogeneousInput, z_baseline: HeterogeneousInput,
                       n_features: int, variance_mode: str = ExplainerDefaults.VARIANCE_MODE
                       ) -> Tuple[GaussianVector, int]:
    """
    First-layer moments of one point under a subset distribution

    Args:
        point: Point index j (a point feature id)
        params: First point-MLP layer
        spec: Subset distribution
        z: Input being explained
        z_baseline: Baseline input
        n_features: |F|
        variance_mode: ``as_written`` or ``bernoulli_point``

    Returns:
        (GaussianVector over the layer's channels, number of clamped variances)
    """
    if not 0 <= point < z.n_points:
        raise DomainError(f"point {point} is not a point feature")
    if variance_mode not in VARIANCE_MODES:
        raise DomainError(f"unknown variance mode {variance_mode!r}")
    ks, forced_in, forced_out = _spec_arrays([spec], n_features)
    pools = (n_features - (forced_in >= 0) - (forced_out >= 0)).astype(np.float64)
    mean, variance, clamped = _first_layer_batch(
        z, z_baseline, params, ks.astype(np.float64), pools, forced_in, forced_out, variance_mode)
    return GaussianVector(mean[0, point], variance[0, point]), clamped


def tabular_subset_moments(x: np.ndarray, weights: np.ndarray, spec: SubsetSpec, n_points: int,
                           x_baseline: Optional[np.ndarray] = None) -> GaussianVector:
    """
    Gaussian summand contributed by the tabular features to the fusion output

    Each tabular column enters with probability k / N, or deterministically
    when it is the forced feature.

    Args:
        x: Tabular vector (D,)
        weights: Fusion weights of the tabular columns (D,)
        spec: Subset distribution over all K + D features
        n_points: K, the number of point features preceding the columns
        x_baseline: Tabular baseline, zeros when omitted

    Returns:
        Scalar GaussianVector (mean, variance)
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape != x.shape:
        raise ShapeError("one fusion weight per tabular column is required")
    x_baseline = np.zeros_like(x) if x_baseline is None else np.asarray(x_baseline, dtype=np.float64)
    n_features = n_points + x.shape[0]
    ks, forced_in, forced_out = _spec_arrays([spec], n_features)
    pools = (n_features - (forced_in >= 0) - (forced_out >= 0)).astype(np.float64)
    z = HeterogeneousInput(np.zeros((n_points, 3)), x)
    z_baseline = HeterogeneousInput(np.zeros((n_points, 3)), x_baseline)
    mean, variance = _tabular_batch(z, z_baseline, weights, ks.astype(np.float64), pools, forced_in, forced_out)
    return GaussianVector(mean[0], variance[0])


# =============================================================================
# FORWARD EXPECTATIONS
# =============================================================================


def prob_forward_expectation(z: HeterogeneousInput, model: ProbWdpnModel, spec: SubsetSpec,
                             z_baseline: HeterogeneousInput,
                             counter: Optional[EvalCounter] = None,
                             reverse_pool: bool = False) -> LogitMoments:
    """
    Estimate E_k[f(z_S; z_bl)] with one probabilistic pass

    Args:
        z: Input being explained
        model: Probabilistic twin
        spec: Subset distribution (size k, optional forced feature)
        z_baseline: Baseline input z_bl
        counter: Optional counter, incremented by one
        reverse_pool: Fold the max-pool right to left (diagnostic)

    Returns:
        LogitMoments with the mean mu_k^S, its variance and the clamp count
    """
    _check_inputs(z, z_baseline, model)
    ks, forced_in, forced_out = _spec_arrays([spec], model.n_features)
    point_mean, tab_mean, variance, clamped = _propagate_batch(
        z, z_baseline, model, ks, forced_in, forced_out, reverse_pool)
    if counter is not None:
        counter.increment(1)
    if clamped:
        logger.debug("Clamped %d negative first-layer variances", clamped)
    return LogitMoments(float(point_mean[0] + tab_mean[0]), float(variance[0]), clamped)


def expectation_differences(z: HeterogeneousInput, model: ProbWdpnModel,
                            features: np.ndarray, ks: np.ndarray,
                            z_baseline: HeterogeneousInput,
                            counter: Optional[EvalCounter] = None,
                            threads: int = 1,
                            chunk_size: int = ExplainerDefaults.PROB_PASS_CHUNK) -> PropagationReport:
    """
    E_k(Delta_i) for many (feature, k) pairs, two passes per pair

    For pair (i, k) the pool is F minus {i}. One pass forces i in, the other
    forces it out. The expectation splits into a point-cloud part, the
    difference of the two point-arm means, and a tabular part. The tabular
    part is w_i (x_i - x_i^bl) when i is tabular and 0 otherwise.

    Args:
        z: Input being explained
        model: Probabilistic twin
        features: Feature ids, shape (Q,)
        ks: Subset sizes in [0, |F| - 1], shape (Q,)
        z_baseline: Baseline input
        counter: Optional counter, incremented by 2 Q
        threads: Worker threads; chunks are fixed so results do not depend on it
        chunk_size: Pairs per chunk

    Returns:
        PropagationReport with one value per pair
    """
    _check_inputs(z, z_baseline, model)
    features = np.asarray(features, dtype=np.int64).reshape(-1)
    ks = np.asarray(ks, dtype=np.int64).reshape(-1)
    n_features = model.n_features
    if features.shape != ks.shape:
        raise ShapeError("features and ks must align")
    if np.any((features < 0) | (features >= n_features)):
        raise DomainError("feature id out of range")
    if np.any((ks < 0) | (ks > n_features - 1)):
        raise DomainError(f"subset sizes must lie in [0, {n_features - 1}]")

    tabular_shortcut = np.zeros(n_features)
    if model.n_tabular:
        tabular_shortcut[model.n_points:] = model.source.tabular_weights * (z.tabular - z_baseline.tabular)
    none = np.full(features.shape[0], -1, dtype=np.int64)

    def run(bounds: Tuple[int, int]) -> Tuple[np.ndarray, int, float]:
        start, stop = bounds
        f, k, n = features[start:stop], ks[start:stop], none[start:stop]
        mean_in, _, var_in, clamp_in = _propagate_batch(z, z_baseline, model, k, f, n)
        mean_out, _, var_out, clamp_out = _propagate_batch(z, z_baseline, model, k, n, f)
        values = (mean_in - mean_out) + tabular_shortcut[f]
        return values, clamp_in + clamp_out, float(np.sum(var_in) + np.sum(var_out))

    results = ordered_map(run, chunk_ranges(features.shape[0], chunk_size), threads)
    values = np.concatenate([r[0] for r in results]) if results else np.zeros(0)
    clamped = sum(r[1] for r in results)
    passes = 2 * features.shape[0]
    mean_var = sum(r[2] for r in results) / max(passes, 1)
    if counter is not None:
        counter.increment(passes)
    if clamped:
        logger.warning("Clamped %d negative variances in %s mode", clamped, model.variance_mode)
    return PropagationReport(values=values, clamped=clamped, mean_output_variance=mean_var, passes=passes)


def expectation_difference(i: int, k: int, z: HeterogeneousInput, model: ProbWdpnModel,
                           z_baseline: HeterogeneousInput,
                           counter: Optional[EvalCounter] = None) -> float:
    """E_k(Delta_i) = mu_k^{S u {i}} - mu_k^S from exactly two passes"""
    report = expectation_differences(z, model, np.array([i]), np.array([k]), z_baseline, counter)
    return float(report.values[0])


def fold_order_sensitivity(z: HeterogeneousInput, model: ProbWdpnModel,
                           z_baseline: HeterogeneousInput, specs: List[SubsetSpec]) -> float:
    """Largest |mean difference| between left-to-right and right-to-left pooling"""
    _check_inputs(z, z_baseline, model)
    ks, forced_in, forced_out = _spec_arrays(specs, model.n_features)
    forward = _propagate_batch(z, z_baseline, model, ks, forced_in, forced_out, False)
    backward = _propagate_batch(z, z_baseline, model, ks, forced_in, forced_out, True)
    return float(np.max(np.abs((forward[0] + forward[1]) - (backward[0] + backward[1]))))

"""
Probabilistic Layer Verification
================================

Monte-Carlo checks of the moment-matched layers and of the end-to-end
subset expectation. Layer oracles push about 10^6 scrambled-Sobol Gaussian
draws through the deterministic layer and compare empirical moments with
the closed forms, within a band of ``Tolerances.STANDARD_ERRORS`` standard
errors.

The end-to-end oracle uses a toy with one point and seven tabular columns
whose point MLP has no activation. Its logit is affine in the inclusion
indicators, so the propagated mean is exact and the band is meaningful. A
second toy with ReLUs and several points is compared with the exhaustive
size-k average under the looser Gaussian-approximation tolerance. That
comparison is reported as a warning, never as a failure.
"""

import itertools
import logging
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from utils.errors import DomainError
from utils.nn_core import (BatchNormParams, DenseLayerParams, EvalCounter,
                           HeterogeneousInput, PointLayer, WdpnModel,
                           batchnorm_infer, wdpn_forward)
from utils.prob_layers import (VARIANCE_MODES, GaussianVector, SubsetSpec,
                               expectation_differences, fold_order_sensitivity,
                               lift_model, prob_batchnorm, prob_forward_expectation,
                               prob_linear, prob_max_pair, prob_maxpool, prob_relu)
from utils.settings import Tolerances, as_seed, derive_seed

logger = logging.getLogger(__name__)

SABOTAGE_MODES = ("relu-mean", "max-variance", "subset-mean")
_SABOTAGE_OFFSET = 0.05
_VARIANCE_FLOOR = 1e-10


# =============================================================================
# ORACLE HELPERS
# =============================================================================


def gaussian_draws(dims: int, samples: int, seed: int) -> np.ndarray:
    """
    Standard normal draws of shape (samples, dims) from a scrambled Sobol set

    ``samples`` is rounded up to a power of two.
    """
    m = int(np.ceil(np.log2(max(samples, 2))))
    sobol = qmc.Sobol(d=dims, scramble=True, seed=np.random.default_rng(as_seed(seed)))
    u = np.clip(sobol.random_base2(m=m), 1e-12, 1.0 - 1e-12)
    return ndtri(u)


def empirical_moments(draws: np.ndarray) -> Dict[str, np.ndarray]:
    """Mean, variance and the standard errors of both along axis 0"""
    n = draws.shape[0]
    mean = draws.mean(axis=0)
    centered = draws - mean
    variance = np.mean(centered ** 2, axis=0)
    fourth = np.mean(centered ** 4, axis=0)
    return {
        "mean": mean,
        "variance": variance,
        "mean_se": np.sqrt(variance / n),
        "variance_se": np.sqrt(np.maximum(fourth - variance ** 2, 0.0) / n),
    }


def within_band(predicted: GaussianVector, oracle: Dict[str, np.ndarray],
                n_se: float = Tolerances.STANDARD_ERRORS) -> Tuple[bool, float]:
    """Whether mean and variance both sit inside the band; also the worst z-score"""
    mean_z = np.abs(predicted.mean - oracle["mean"]) / np.maximum(oracle["mean_se"], _VARIANCE_FLOOR)
    var_z = np.abs(predicted.variance - oracle["variance"]) / np.maximum(oracle["variance_se"], _VARIANCE_FLOOR)
    worst = float(max(np.max(mean_z), np.max(var_z)))
    return worst <= n_se, worst


# =============================================================================
# TOY MODELS
# =============================================================================


def affine_toy(seed: int) -> Tuple[WdpnModel, HeterogeneousInput, HeterogeneousInput]:
    """
    One point, seven tabular columns, linear point arm

    Returns:
        (model, z, baseline) with a non-zero point baseline
    """
    rng = np.random.default_rng(as_seed(seed))
    layer = PointLayer(
        DenseLayerParams(rng.normal(size=(3, 4)), rng.normal(size=4)),
        BatchNormParams(rng.uniform(0.5, 2.0, 4), rng.normal(size=4), rng.normal(size=4),
                        rng.uniform(0.5, 2.0, 4)),
        activation=False)
    model = WdpnModel((layer,), DenseLayerParams(rng.normal(size=(11, 1)), rng.normal(size=1)), 1, 7)
    z = HeterogeneousInput(rng.uniform(-1, 1, size=(1, 3)), rng.normal(size=7))
    baseline = HeterogeneousInput(rng.uniform(-1, 1, size=(1, 3)), np.zeros(7))
    return model, z, baseline


def relu_toy(seed: int, n_points: int = 4, n_tabular: int = 4,
             width: int = 8) -> Tuple[WdpnModel, HeterogeneousInput, HeterogeneousInput]:
    """Small ReLU network with several points, zero baseline"""
    rng = np.random.default_rng(as_seed(seed))
    scale = 1.0 / np.sqrt(3)
    first = PointLayer(DenseLayerParams(rng.uniform(-scale, scale, (3, width)), rng.uniform(-0.1, 0.1, width)),
                       BatchNormParams.identity(width), True)
    scale = 1.0 / np.sqrt(width)
    second = PointLayer(DenseLayerParams(rng.uniform(-scale, scale, (width, width)), rng.uniform(-0.1, 0.1, width)),
                        BatchNormParams.identity(width), True)
    fusion = DenseLayerParams(0.5 * rng.normal(size=(width + n_tabular, 1)), np.zeros(1))
    model = WdpnModel((first, second), fusion, n_points, n_tabular)
    z = HeterogeneousInput(rng.uniform(-1, 1, size=(n_points, 3)), rng.normal(size=n_tabular))
    baseline = HeterogeneousInput(np.zeros((n_points, 3)), np.zeros(n_tabular))
    return model, z, baseline


def _pool_subsets(n_features: int, spec: SubsetSpec) -> np.ndarray:
    forced = {spec.forced_in, spec.forced_out} - {None}
    pool = [f for f in range(n_features) if f not in forced]
    masks = []
    for chosen in itertools.combinations(pool, spec.k):
        mask = np.zeros(n_features, dtype=bool)
        mask[list(chosen)] = True
        if spec.forced_in is not None:
            mask[spec.forced_in] = True
        masks.append(mask)
    return np.array(masks, dtype=bool).reshape(-1, n_features)


def subset_oracle(model: WdpnModel, z: HeterogeneousInput, baseline: HeterogeneousInput,
                  spec: SubsetSpec, samples: int, rng: np.random.Generator) -> Dict[str, float]:
    """
    Empirical E[f(z_S)] over ``samples`` uniform size-k subsets of the pool

    Draws cycle through every subset of the pool in shuffled order, so each
    subset is used equally often up to one.
    """
    every = _pool_subsets(model.n_features, spec)
    repeats = int(np.ceil(samples / every.shape[0]))
    order = np.concatenate([rng.permutation(every.shape[0]) for _ in range(repeats)])[:samples]
    unique_logits = model.masked_logits(z, baseline, every)
    logits = unique_logits[order]
    return {"mean": float(logits.mean()),
            "mean_se": float(logits.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0}


def exhaustive_difference(model: WdpnModel, z: HeterogeneousInput, baseline: HeterogeneousInput,
                          feature: int, k: int) -> float:
    """Average of f(z_{S+i}) - f(z_S) over every size-k subset S of F minus {i}"""
    with_i = _pool_subsets(model.n_features, SubsetSpec(k, forced_in=feature))
    without_i = _pool_subsets(model.n_features, SubsetSpec(k, forced_out=feature))
    return float(np.mean(model.masked_logits(z, baseline, with_i)
                         - model.masked_logits(z, baseline, without_i)))


# =============================================================================
# SUITE
# =============================================================================


class ProbVerificationSuite:
    """
    Monte-Carlo verification of the probabilistic layers

    Results use the shape {tests_run, tests_passed, tests_failed, warnings,
    details}, one detail entry per check.
    """

    def __init__(self, seed: int, samples: int = Tolerances.LAYER_ORACLE_SAMPLES,
                 configs: int = Tolerances.LAYER_ORACLE_CONFIGS,
                 subset_samples: int = Tolerances.SUBSET_ORACLE_SAMPLES,
                 sabotage: Optional[str] = None):
        if sabotage is not None and sabotage not in SABOTAGE_MODES:
            raise DomainError(f"unknown sabotage mode {sabotage!r}; expected one of {SABOTAGE_MODES}")
        self.seed = seed
        self.samples = samples
        self.configs = configs
        self.subset_samples = subset_samples
        self.sabotage = sabotage

    @staticmethod
    def _new_results() -> Dict[str, Any]:
        return {"tests_run": 0, "tests_passed": 0, "tests_failed": 0, "warnings": 0, "details": []}

    @staticmethod
    def _record(results: Dict[str, Any], name: str, check: Callable[[], Dict[str, Any]]) -> None:
        try:
            detail = check()
            status = "PASS" if detail.pop("passed") else "FAIL"
            results["details"].append(dict(test=name, status=status, **detail))
            if status == "PASS":
                results["tests_passed"] += 1
            else:
                results["tests_failed"] += 1
        except Exception as exc:
            logger.exception("Check %s raised", name)
            results["details"].append({"test": name, "status": "ERROR", "error": str(exc)})
            results["tests_failed"] += 1
        results["tests_run"] += 1

    def _draws(self, dims: int, *keys: int) -> np.ndarray:
        return gaussian_draws(dims, self.samples, derive_seed(self.seed, *keys))

    def _rng(self, *keys: int) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, *keys))

    # -------------------------------------------------------------------------
    # layer checks
    # -------------------------------------------------------------------------

    def _layer_check(self, layer_key: int,
                     case: Callable[[np.random.Generator, int], Tuple[GaussianVector, np.ndarray]]
                     ) -> Dict[str, Any]:
        worst, passed = 0.0, True
        for config in range(self.configs):
            predicted, outputs = case(self._rng(layer_key, config), config)
            ok, score = within_band(predicted, empirical_moments(outputs))
            passed = passed and ok
            worst = max(worst, score)
        return {"passed": passed, "worst_standard_errors": worst, "configs": self.configs}

    def check_relu(self) -> Dict[str, Any]:
        def case(rng: np.random.Generator, config: int) -> Tuple[GaussianVector, np.ndarray]:
            mean, var = rng.normal(0.0, 2.0, size=1), rng.uniform(0.1, 4.0, size=1)
            predicted = prob_relu(GaussianVector(mean, var))
            if self.sabotage == "relu-mean":
                predicted = GaussianVector(predicted.mean + _SABOTAGE_OFFSET, predicted.variance)
            x = mean + np.sqrt(var) * self._draws(1, 1, config)
            return predicted, np.maximum(x, 0.0)
        return self._layer_check(11, case)

    def check_batchnorm(self) -> Dict[str, Any]:
        def case(rng: np.random.Generator, config: int) -> Tuple[GaussianVector, np.ndarray]:
            params = BatchNormParams(rng.uniform(0.5, 2.0, 2), rng.normal(size=2), rng.normal(size=2),
                                     rng.uniform(0.2, 3.0, 2))
            mean, var = rng.normal(size=2), rng.uniform(0.1, 3.0, size=2)
            x = mean + np.sqrt(var) * self._draws(2, 2, config)
            return prob_batchnorm(GaussianVector(mean, var), params), batchnorm_infer(x, params)
        return self._layer_check(12, case)

    def check_max_pair(self) -> Dict[str, Any]:
        def case(rng: np.random.Generator, config: int) -> Tuple[GaussianVector, np.ndarray]:
            mean, var = rng.normal(size=2), rng.uniform(0.1, 3.0, size=2)
            predicted = prob_max_pair(GaussianVector(mean[:1], var[:1]), GaussianVector(mean[1:], var[1:]))
            if self.sabotage == "max-variance":
                predicted = GaussianVector(predicted.mean, predicted.variance * 1.1)
            x = mean + np.sqrt(var) * self._draws(2, 3, config)
            return predicted, x.max(axis=1, keepdims=True)
        return self._layer_check(13, case)

    def check_linear(self) -> Dict[str, Any]:
        def case(rng: np.random.Generator, config: int) -> Tuple[GaussianVector, np.ndarray]:
            params = DenseLayerParams(rng.normal(size=(3, 2)), rng.normal(size=2))
            mean, var = rng.normal(size=3), rng.uniform(0.1, 3.0, size=3)
            x = mean + np.sqrt(var) * self._draws(3, 4, config)
            return prob_linear(GaussianVector(mean, var), params), x @ params.weights + params.bias
        return self._layer_check(14, case)

    def check_maxpool(self, points: int = 16) -> Dict[str, Any]:
        """Fold of 16 pairwise maxima against the joint oracle, Gaussian-approximation tolerance"""
        rng = self._rng(15)
        mean, var = rng.normal(size=points), rng.uniform(0.1, 2.0, size=points)
        predicted = prob_maxpool([GaussianVector(mean[j:j + 1], var[j:j + 1]) for j in range(points)])
        x = mean + np.sqrt(var) * self._draws(points, 5)
        oracle = empirical_moments(x.max(axis=1, keepdims=True))
        scale = max(1.0, float(np.sqrt(oracle["variance"][0])))
        error = float(abs(predicted.mean[0] - oracle["mean"][0]))
        return {"passed": error <= Tolerances.GAUSSIAN_APPROXIMATION * scale,
                "mean_error": error, "variance_error": float(abs(predicted.variance[0] - oracle["variance"][0]))}

    # -------------------------------------------------------------------------
    # end-to-end checks
    # -------------------------------------------------------------------------

    def _subset_specs(self, n_features: int) -> List[SubsetSpec]:
        rng = self._rng(21)
        specs = [SubsetSpec(k) for k in range(n_features + 1)]
        for _ in range(6):
            feature = int(rng.integers(n_features))
            k = int(rng.integers(n_features))
            specs.append(SubsetSpec(k, forced_in=feature))
            specs.append(SubsetSpec(k, forced_out=feature))
        return specs

    def check_subset_expectation(self, variance_mode: str) -> Dict[str, Any]:
        model, z, baseline = affine_toy(derive_seed(self.seed, 20))
        prob = lift_model(model, variance_mode)
        rng = self._rng(22, VARIANCE_MODES.index(variance_mode))
        worst, passed = 0.0, True
        specs = self._subset_specs(model.n_features)
        for spec in specs:
            predicted = prob_forward_expectation(z, prob, spec, baseline).mean
            if self.sabotage == "subset-mean":
                predicted += _SABOTAGE_OFFSET
            oracle = subset_oracle(model, z, baseline, spec, self.subset_samples, rng)
            score = abs(predicted - oracle["mean"]) / max(oracle["mean_se"], _VARIANCE_FLOOR)
            ok = abs(predicted - oracle["mean"]) <= 1e-9 or score <= Tolerances.STANDARD_ERRORS
            passed = passed and ok
            worst = max(worst, score if not ok else min(score, Tolerances.STANDARD_ERRORS))
        return {"passed": passed, "worst_standard_errors": worst, "specs": len(specs)}

    def check_degenerate_fidelity(self) -> Dict[str, Any]:
        model, z, baseline = relu_toy(derive_seed(self.seed, 30))
        n = model.n_features
        worst = 0.0
        logit = wdpn_forward(z, model)
        for mode in VARIANCE_MODES:
            prob = lift_model(model, mode)
            for feature in range(n):
                moments = prob_forward_expectation(z, prob, SubsetSpec(n - 1, forced_in=feature), baseline)
                worst = max(worst, abs(moments.mean - logit), moments.variance)
        return {"passed": worst <= Tolerances.DEGENERATE_FIDELITY, "max_deviation": worst}

    def clamp_report(self) -> Dict[str, Any]:
        """Clamp counts of a full (feature, k) sweep on the ReLU toy, per variance mode"""
        model, z, baseline = relu_toy(derive_seed(self.seed, 30))
        n = model.n_features
        features, ks = np.repeat(np.arange(n), n), np.tile(np.arange(n), n)
        counts = {}
        for mode in VARIANCE_MODES:
            report = expectation_differences(z, lift_model(model, mode), features, ks, baseline, EvalCounter())
            counts[mode] = report.clamped
        return counts

    def nonlinear_report(self) -> Dict[str, Any]:
        model, z, baseline = relu_toy(derive_seed(self.seed, 30))
        n = model.n_features
        errors = {}
        for mode in VARIANCE_MODES:
            prob = lift_model(model, mode)
            worst = 0.0
            for feature in range(model.n_points):
                ks = np.arange(n)
                predicted = expectation_differences(z, prob, np.full(n, feature), ks, baseline).values
                exact = np.array([exhaustive_difference(model, z, baseline, feature, int(k)) for k in ks])
                worst = max(worst, float(np.max(np.abs(predicted - exact))))
            errors[mode] = worst
        fold = fold_order_sensitivity(z, lift_model(model), baseline,
                                      [SubsetSpec(k) for k in range(n + 1)])
        return {"max_abs_error": errors, "tolerance": Tolerances.GAUSSIAN_APPROXIMATION,
                "fold_order_max_delta": fold}

    # -------------------------------------------------------------------------
    # entry point
    # -------------------------------------------------------------------------

    def run_all(self) -> Dict[str, Any]:
        results = self._new_results()
        self._record(results, "prob_relu", self.check_relu)
        self._record(results, "prob_batchnorm", self.check_batchnorm)
        self._record(results, "prob_max_pair", self.check_max_pair)
        self._record(results, "prob_linear", self.check_linear)
        self._record(results, "prob_maxpool_16", self.check_maxpool)
        for mode in VARIANCE_MODES:
            self._record(results, f"subset_expectation[{mode}]",
                         lambda mode=mode: self.check_subset_expectation(mode))
        self._record(results, "degenerate_fidelity", self.check_degenerate_fidelity)

        counts = self.clamp_report()
        results["clamp_counts"] = counts
        self._record(results, "bernoulli_point_never_clamps",
                     lambda: {"passed": counts["bernoulli_point"] == 0,
                              "clamped": counts["bernoulli_point"]})

        nonlinear = self.nonlinear_report()
        results["nonlinear_toy"] = nonlinear
        for mode, error in nonlinear["max_abs_error"].items():
            if error > Tolerances.GAUSSIAN_APPROXIMATION:
                results["warnings"] += 1
                logger.warning("Nonlinear toy (%s): max |error| %.4f exceeds %.2f",
                               mode, error, Tolerances.GAUSSIAN_APPROXIMATION)
        results["fold_order_max_delta"] = nonlinear["fold_order_max_delta"]
        logger.info("Verification: %d/%d checks passed", results["tests_passed"], results["tests_run"])
        return results

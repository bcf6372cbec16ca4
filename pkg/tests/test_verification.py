"""
Tests for the Monte-Carlo verification of the probabilistic layers.
"""

import numpy as np
import pytest

from utils.errors import DomainError
from utils.prob_layers import SubsetSpec, expectation_difference, lift_model, prob_forward_expectation
from utils.verification import (ProbVerificationSuite, affine_toy, empirical_moments,
                                exhaustive_difference, gaussian_draws, relu_toy, subset_oracle)

SAMPLES = 2 ** 16


class TestOracleHelpers:
    def test_draws_round_up_to_power_of_two(self):
        draws = gaussian_draws(3, 1000, seed=1)
        assert draws.shape == (1024, 3)
        assert np.all(np.isfinite(draws))

    def test_draws_are_standard_normal(self):
        moments = empirical_moments(gaussian_draws(2, SAMPLES, seed=2))
        np.testing.assert_allclose(moments["mean"], 0.0, atol=0.02)
        np.testing.assert_allclose(moments["variance"], 1.0, atol=0.02)

    def test_draws_are_seeded(self):
        np.testing.assert_array_equal(gaussian_draws(2, 64, seed=3), gaussian_draws(2, 64, seed=3))

    def test_subset_oracle_on_affine_toy(self):
        model, z, baseline = affine_toy(4)
        rng = np.random.default_rng(42)
        for spec in (SubsetSpec(3), SubsetSpec(2, forced_in=0), SubsetSpec(5, forced_out=6)):
            oracle = subset_oracle(model, z, baseline, spec, 20000, rng)
            predicted = prob_forward_expectation(z, lift_model(model), spec, baseline).mean
            assert abs(predicted - oracle["mean"]) <= 3.0 * oracle["mean_se"] + 1e-9

    def test_exhaustive_difference_of_tabular_feature(self):
        model, z, baseline = relu_toy(5)
        feature = model.n_points + 1
        weight = model.tabular_weights[1]
        for k in range(model.n_features):
            assert exhaustive_difference(model, z, baseline, feature, k) == pytest.approx(weight * z.tabular[1])
            assert expectation_difference(feature, k, z, lift_model(model), baseline) == \
                pytest.approx(weight * z.tabular[1])


class TestLayerChecks:
    def setup_method(self):
        self.suite = ProbVerificationSuite(seed=7, samples=SAMPLES, configs=5)

    @pytest.mark.parametrize("check", ["check_relu", "check_batchnorm", "check_max_pair", "check_linear"])
    def test_layers_pass(self, check):
        assert getattr(self.suite, check)()["passed"]

    def test_maxpool_within_approximation_tolerance(self):
        assert self.suite.check_maxpool()["passed"]

    def test_degenerate_fidelity(self):
        result = self.suite.check_degenerate_fidelity()
        assert result["passed"]
        assert result["max_deviation"] <= 1e-9

    @pytest.mark.parametrize("mode", ["as_written", "bernoulli_point"])
    def test_subset_expectation(self, mode):
        assert self.suite.check_subset_expectation(mode)["passed"]

    def test_bernoulli_point_never_clamps(self):
        assert self.suite.clamp_report()["bernoulli_point"] == 0


class TestSabotage:
    @pytest.mark.parametrize("mode, check", [
        ("relu-mean", lambda s: s.check_relu()),
        ("max-variance", lambda s: s.check_max_pair()),
        ("subset-mean", lambda s: s.check_subset_expectation("as_written")),
    ])
    def test_sabotaged_operator_is_caught(self, mode, check):
        suite = ProbVerificationSuite(seed=7, samples=SAMPLES, configs=5, sabotage=mode)
        assert not check(suite)["passed"]

    def test_unknown_mode(self):
        with pytest.raises(DomainError):
            ProbVerificationSuite(seed=0, sabotage="everything")


class TestRunAll:
    @pytest.mark.slow
    def test_summary_shape(self):
        results = ProbVerificationSuite(seed=11, samples=SAMPLES, configs=3, subset_samples=5000).run_all()
        assert results["tests_run"] == results["tests_passed"] + results["tests_failed"]
        assert results["tests_failed"] == 0
        assert {d["test"] for d in results["details"]} >= {"prob_relu", "prob_maxpool_16", "degenerate_fidelity"}
        assert set(results["clamp_counts"]) == {"as_written", "bernoulli_point"}
        assert results["fold_order_max_delta"] >= 0.0

    def test_sabotaged_run_reports_failure(self):
        results = ProbVerificationSuite(seed=11, samples=2 ** 14, configs=2, subset_samples=2000,
                                        sabotage="max-variance").run_all()
        failed = [d["test"] for d in results["details"] if d["status"] != "PASS"]
        assert "prob_max_pair" in failed

"""
Tests for the explainers: exact enumeration, permutation sampling, occlusion
and the probabilistic Shapley approximations.
"""

import numpy as np
import pytest

from conftest import ProductModel, build_model, linear_tabular_model, random_input
from utils.attribution import (BaselineSpec, ExplainerConfig, FeatureSpace,
                               coalition_value, exact_shapley, explain, masked_input,
                               occlusion, relevance_summary, shapley_sampling,
                               shapley_weights, svehnn_full, svehnn_mc)
from utils.errors import DomainError, ExplanationRefused, ShapeError
from utils.nn_core import (DenseLayerParams, HeterogeneousInput, SummedModel,
                           WdpnModel, wdpn_forward)

ZERO = BaselineSpec.zero()


class TestCoalitions:
    def test_product_toy_values(self, product_model, product_input):
        assert coalition_value([], product_input, product_model, ZERO) == 0.0
        assert coalition_value([0, 1, 2], product_input, product_model, ZERO) == 1.0
        assert coalition_value([1], product_input, product_model, ZERO) == 0.0

    def test_masked_input_extremes(self):
        z = random_input(0, 4, 2)
        full = masked_input(z, np.ones(6, dtype=bool), ZERO)
        empty = masked_input(z, [], ZERO)
        np.testing.assert_array_equal(full.points, z.points)
        np.testing.assert_array_equal(full.tabular, z.tabular)
        np.testing.assert_array_equal(empty.points, np.zeros((4, 3)))
        np.testing.assert_array_equal(empty.tabular, np.zeros(2))

    def test_masked_input_uses_template(self):
        z = random_input(1, 3, 1)
        template = np.arange(9.0).reshape(3, 3)
        out = masked_input(z, [0, 3], BaselineSpec.hull(template))
        np.testing.assert_array_equal(out.points[0], z.points[0])
        np.testing.assert_array_equal(out.points[1:], template[1:])
        assert out.tabular[0] == z.tabular[0]

    def test_unknown_feature_id(self):
        with pytest.raises(DomainError):
            masked_input(random_input(1, 3, 1), [4], ZERO)

    def test_hull_baseline_without_template(self):
        with pytest.raises(DomainError):
            BaselineSpec("hull")

    def test_hull_template_size_mismatch(self):
        with pytest.raises(ShapeError):
            BaselineSpec.hull(np.zeros((2, 3))).baseline_input(random_input(1, 3, 1))

    def test_shapley_weights_sum_per_size(self):
        from scipy.special import comb
        n = 7
        weights = shapley_weights(n)
        totals = [comb(n - 1, s) * weights[s] for s in range(n)]
        np.testing.assert_allclose(totals, np.full(n, 1.0 / n))


class TestProductToy:
    def test_exact(self, product_model, product_input):
        result = exact_shapley(product_input, product_model, ZERO)
        np.testing.assert_allclose(result.values, [0.0, 0.5, 0.5], atol=1e-12)
        assert result.evaluations == 2 ** 3 + 2

    def test_sampling_converges(self, product_model, product_input):
        result = shapley_sampling(product_input, product_model, ZERO, ExplainerConfig(n_samples=10000, seed=3))
        np.testing.assert_allclose(result.values, [0.0, 0.5, 0.5], atol=0.02)
        assert result.diagnostics["permutation_scheme"] == "random"
        assert result.evaluations == 30000

    def test_sampling_exhaustive_cycle_is_exact(self, product_model, product_input):
        result = shapley_sampling(product_input, product_model, ZERO, ExplainerConfig(n_samples=12))
        assert result.diagnostics["permutation_scheme"] == "exhaustive"
        np.testing.assert_allclose(result.values, [0.0, 0.5, 0.5], atol=1e-12)

    def test_occlusion(self, product_model, product_input):
        result = occlusion(product_input, product_model, ZERO)
        np.testing.assert_allclose(result.values, [0.0, 1.0, 1.0])
        assert result.evaluations == 4

    def test_svehnn_rejects_black_box(self, product_model, product_input):
        with pytest.raises(DomainError):
            svehnn_full(product_input, product_model, ZERO)


class TestLinearTabularModel:
    def setup_method(self):
        self.model = linear_tabular_model(3, [2.0, -1.0, 0.5], bias=0.3)
        self.z = HeterogeneousInput(np.random.default_rng(42).uniform(-1, 1, (3, 3)), [1.0, 2.0, -4.0])
        self.expected = [0.0, 0.0, 0.0, 2.0, -2.0, -2.0]

    @pytest.mark.parametrize("estimator", ["exact", "occlusion", "svehnn"])
    def test_values_are_weight_times_input(self, estimator):
        result = explain(estimator, self.z, self.model, ZERO, ExplainerConfig())
        np.testing.assert_allclose(result.values, self.expected, atol=1e-9)

    def test_sampling_is_exact_for_additive_models(self):
        result = shapley_sampling(self.z, self.model, ZERO, ExplainerConfig(n_samples=50, seed=1))
        np.testing.assert_allclose(result.values, self.expected, atol=1e-9)


class TestEvaluationCounts:
    """Sixteen point features, no tabular columns"""

    def setup_method(self):
        self.model = build_model(0, 16, 0)
        self.z = random_input(1, 16, 0)

    def test_exact(self):
        assert exact_shapley(self.z, self.model, ZERO).evaluations == 65538

    @pytest.mark.parametrize("m, expected", [(2000, 32000), (32, 512)])
    def test_sampling(self, m, expected):
        result = shapley_sampling(self.z, self.model, ZERO, ExplainerConfig(n_samples=m))
        assert result.evaluations == expected

    def test_occlusion(self):
        assert occlusion(self.z, self.model, ZERO).evaluations == 17

    def test_svehnn(self):
        assert svehnn_full(self.z, self.model, ZERO).evaluations == 512

    def test_svehnn_mc(self):
        result = svehnn_mc(self.z, self.model, ZERO, ExplainerConfig(n_samples=150))
        assert result.evaluations == 4800

    def test_refuses_more_than_24_features(self):
        model = build_model(2, 20, 5)
        with pytest.raises(ExplanationRefused):
            exact_shapley(random_input(3, 20, 5), model, ZERO)


class TestShapleyAxioms:
    def test_completeness(self):
        model = build_model(4, 4, 3)
        for seed in range(20):
            z = random_input(100 + seed, 4, 3)
            result = exact_shapley(z, model, ZERO)
            scale = max(1.0, abs(result.logit - result.baseline_logit))
            assert abs(result.completeness_gap) <= 1e-6 * scale
            assert result.logit == pytest.approx(wdpn_forward(z, model), abs=1e-12)

    def test_completeness_with_hull_baseline(self):
        model = build_model(5, 4, 2)
        baseline = BaselineSpec.hull(np.random.default_rng(42).uniform(-1, 1, (4, 3)))
        result = exact_shapley(random_input(6, 4, 2), model, baseline)
        assert abs(result.completeness_gap) <= 1e-9

    def test_null_player(self):
        model = build_model(7, 3, 3)
        weights = model.fusion.weights.copy()
        weights[-1, 0] = 0.0
        model = WdpnModel(model.point_mlp, DenseLayerParams(weights, model.fusion.bias), 3, 3)
        z = random_input(8, 3, 3)
        for estimator in ("exact", "occlusion", "svehnn"):
            result = explain(estimator, z, model, ZERO, ExplainerConfig())
            assert abs(result.values[-1]) <= 1e-9

    def test_symmetry(self):
        model = build_model(9, 3, 2)
        weights = model.fusion.weights.copy()
        weights[-1, 0] = weights[-2, 0]
        model = WdpnModel(model.point_mlp, DenseLayerParams(weights, model.fusion.bias), 3, 2)
        z = HeterogeneousInput(random_input(10, 3, 2).points, [0.7, 0.7])
        result = exact_shapley(z, model, ZERO)
        assert result.values[-1] == pytest.approx(result.values[-2], abs=1e-9)

    def test_linearity(self):
        f, g = build_model(11, 3, 2), build_model(12, 3, 2)
        z = random_input(13, 3, 2)
        combined = exact_shapley(z, SummedModel([f, g], [2.0, -0.5]), ZERO)
        expected = 2.0 * exact_shapley(z, f, ZERO).values - 0.5 * exact_shapley(z, g, ZERO).values
        np.testing.assert_allclose(combined.values, expected, atol=1e-9)

    def test_logit_scaling(self):
        model = build_model(14, 3, 2)
        scaled = WdpnModel(model.point_mlp, DenseLayerParams(3.0 * model.fusion.weights, 3.0 * model.fusion.bias),
                           3, 2)
        z = random_input(15, 3, 2)
        np.testing.assert_allclose(exact_shapley(z, scaled, ZERO).values,
                                   3.0 * exact_shapley(z, model, ZERO).values, atol=1e-9)


class TestSampling:
    def test_single_permutation_telescopes(self):
        model = build_model(16, 5, 2)
        z = random_input(17, 5, 2)
        result = shapley_sampling(z, model, ZERO, ExplainerConfig(n_samples=1, seed=4))
        assert abs(result.completeness_gap) <= 1e-9

    def test_same_seed_same_result_across_threads(self):
        model = build_model(18, 6, 2)
        z = random_input(19, 6, 2)
        one = shapley_sampling(z, model, ZERO, ExplainerConfig(n_samples=700, seed=5, threads=1))
        four = shapley_sampling(z, model, ZERO, ExplainerConfig(n_samples=700, seed=5, threads=4))
        np.testing.assert_array_equal(one.values, four.values)

    def test_seed_changes_result(self):
        model = build_model(18, 6, 2)
        z = random_input(19, 6, 2)
        a = shapley_sampling(z, model, ZERO, ExplainerConfig(n_samples=20, seed=1))
        b = shapley_sampling(z, model, ZERO, ExplainerConfig(n_samples=20, seed=2))
        assert not np.array_equal(a.values, b.values)

    def test_mse_shrinks_with_budget(self):
        # MSE ~ 1/M, so quadrupling M cuts it about four-fold (root MSE halves)
        model = build_model(30, 6, 2)
        z = random_input(31, 6, 2)
        truth = exact_shapley(z, model, ZERO).values
        errors = {16: [], 64: []}
        for seed in range(100):
            for m, sink in errors.items():
                estimate = shapley_sampling(z, model, ZERO, ExplainerConfig(n_samples=m, seed=seed)).values
                sink.append(np.mean((estimate - truth) ** 2))
        assert np.mean(errors[64]) > 0.0
        ratio = np.mean(errors[16]) / np.mean(errors[64])
        assert 2.5 < ratio < 6.5


class TestProbabilisticExplainers:
    def test_stratified_mc_with_m_equal_features_matches_full(self):
        model = build_model(20, 5, 2)
        z = random_input(21, 5, 2)
        full = svehnn_full(z, model, ZERO)
        mc = svehnn_mc(z, model, ZERO, ExplainerConfig(n_samples=7, stratified=True))
        np.testing.assert_array_equal(full.values, mc.values)

    def test_mc_close_to_full(self):
        model = build_model(22, 12, 4)
        z = random_input(23, 12, 4)
        full = svehnn_full(z, model, ZERO)
        mc = svehnn_mc(z, model, ZERO, ExplainerConfig(n_samples=150, seed=6))
        assert np.mean(np.abs(full.values - mc.values)) < 0.05

    def test_threads_do_not_change_values(self):
        model = build_model(24, 6, 2)
        z = random_input(25, 6, 2)
        np.testing.assert_array_equal(svehnn_full(z, model, ZERO, threads=1).values,
                                      svehnn_full(z, model, ZERO, threads=3).values)

    def test_diagnostics(self):
        model = build_model(26, 4, 1)
        result = svehnn_full(random_input(27, 4, 1), model, ZERO, variance_mode="bernoulli_point")
        assert result.diagnostics["variance_mode"] == "bernoulli_point"
        assert result.diagnostics["clamped_variances"] == 0
        assert result.diagnostics["reference_evaluations"] == 2

    def test_close_to_exact_on_small_model(self):
        model = build_model(28, 6, 2, fusion_scale=0.5)
        z = random_input(29, 6, 2)
        exact = exact_shapley(z, model, ZERO)
        approx = svehnn_full(z, model, ZERO)
        assert np.mean((exact.values - approx.values) ** 2) < 0.05


class TestReports:
    def setup_method(self):
        self.model = build_model(30, 3, 2)
        self.z = random_input(31, 3, 2)
        self.space = FeatureSpace.of(self.model, ["age", "dose"])
        self.result = exact_shapley(self.z, self.model, ZERO, feature_space=self.space)

    def test_records(self):
        rows = self.result.records(self.z)
        assert [r["kind"] for r in rows] == ["point", "point", "point", "tabular", "tabular"]
        assert rows[0]["point_coords"] == self.z.points[0].tolist()
        assert rows[4]["column_name"] == "dose"

    def test_waterfall_ends_at_logit(self):
        waterfall = self.result.waterfall()
        assert waterfall["start"] == self.result.baseline_logit
        assert waterfall["end"] == pytest.approx(self.result.logit, abs=1e-9)
        magnitudes = [abs(step["value"]) for step in waterfall["steps"]]
        assert magnitudes == sorted(magnitudes, reverse=True)

    def test_report_dict(self):
        report = self.result.to_report_dict(self.z)
        assert report["estimator"] == "exact"
        assert 0.0 < report["probability"] < 1.0
        assert report["evaluations"] == 2 ** 5 + 2

    def test_shape_total(self):
        assert self.result.shape_total == pytest.approx(float(np.sum(self.result.values[:3])))

    def test_relevance_summary(self):
        others = [exact_shapley(random_input(s, 3, 2), self.model, ZERO, feature_space=self.space)
                  for s in range(32, 35)]
        frame = relevance_summary([self.result] + others)
        assert len(frame) == 6
        assert frame.iloc[-1]["label"] == "shape_total"
        assert sorted(frame["rank"].iloc[:5]) == [1, 2, 3, 4, 5]

    def test_unknown_estimator(self):
        with pytest.raises(DomainError):
            explain("lime", self.z, self.model, ZERO, ExplainerConfig())

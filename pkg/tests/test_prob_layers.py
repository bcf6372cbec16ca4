"""
Tests for moment-matched layers and subset-distribution propagation.
"""

import numpy as np
import pytest

from conftest import build_model, linear_tabular_model, random_input
from utils.errors import DomainError
from utils.nn_core import (DenseLayerParams, BatchNormParams, HeterogeneousInput,
                           EvalCounter, wdpn_forward, masked_forward)
from utils.prob_layers import (VARIANCE_MODES, GaussianVector, SubsetSpec, expectation_difference,
                               expectation_differences, fold_order_sensitivity,
                               lift_model, normal_pdf, prob_batchnorm, prob_forward_expectation,
                               prob_linear, prob_max_pair, prob_maxpool, prob_relu,
                               subset_first_layer, tabular_subset_moments)
from utils.settings import Tolerances
from utils.verification import exhaustive_difference, relu_toy

SQRT_2PI = np.sqrt(2.0 * np.pi)


def sixteen_points():
    """K=16 cloud whose first point is (1, 0, 0); all-ones first layer"""
    rng = np.random.default_rng(42)
    points = rng.uniform(-1, 1, (16, 3))
    points[0] = [1.0, 0.0, 0.0]
    z = HeterogeneousInput(points, [])
    z_bl = HeterogeneousInput(np.zeros((16, 3)), [])
    return z, z_bl, DenseLayerParams(np.ones((3, 1)), [0.0])


class TestFirstLayer:
    @pytest.mark.parametrize("mode", ["as_written", "bernoulli_point"])
    def test_half_inclusion(self, mode):
        z, z_bl, params = sixteen_points()
        g, clamped = subset_first_layer(0, params, SubsetSpec(8), z, z_bl, 16, mode)
        np.testing.assert_allclose(g.mean, [0.5])
        np.testing.assert_allclose(g.variance, [0.25])
        assert clamped == 0

    def test_empty_and_full_subsets_are_deterministic(self):
        z, z_bl, params = sixteen_points()
        empty, _ = subset_first_layer(0, params, SubsetSpec(0), z, z_bl, 16)
        full, _ = subset_first_layer(0, params, SubsetSpec(16), z, z_bl, 16)
        np.testing.assert_allclose(empty.mean, [0.0])
        np.testing.assert_allclose(full.mean, [1.0])
        np.testing.assert_allclose(empty.variance, [0.0])
        np.testing.assert_allclose(full.variance, [0.0], atol=1e-15)

    def test_forced_point(self):
        z, z_bl, params = sixteen_points()
        g_in, _ = subset_first_layer(0, params, SubsetSpec(5, forced_in=0), z, z_bl, 16)
        g_out, _ = subset_first_layer(0, params, SubsetSpec(5, forced_out=0), z, z_bl, 16)
        np.testing.assert_allclose(g_in.mean, [1.0])
        np.testing.assert_allclose(g_out.mean, [0.0])
        assert g_in.variance[0] == 0.0 and g_out.variance[0] == 0.0

    def test_k_outside_pool(self):
        z, z_bl, params = sixteen_points()
        with pytest.raises(DomainError):
            subset_first_layer(0, params, SubsetSpec(16, forced_in=1), z, z_bl, 16)

    def test_forced_in_and_out_same_feature(self):
        with pytest.raises(DomainError):
            SubsetSpec(2, forced_in=3, forced_out=3).validate(16)


class TestTabularMoments:
    def test_no_columns(self):
        g = tabular_subset_moments(np.zeros(0), np.zeros(0), SubsetSpec(1), n_points=3)
        assert float(g.mean) == 0.0 and float(g.variance) == 0.0

    def test_forced_column_is_deterministic(self):
        g = tabular_subset_moments(np.array([2.0]), np.array([3.0]), SubsetSpec(0, forced_in=4), n_points=4)
        assert float(g.mean) == pytest.approx(6.0)
        assert float(g.variance) == 0.0

    def test_bernoulli_column(self):
        g = tabular_subset_moments(np.array([2.0]), np.array([1.0]), SubsetSpec(2), n_points=3)
        assert float(g.mean) == pytest.approx(1.0)
        assert float(g.variance) == pytest.approx(1.0)


class TestMomentLayers:
    @pytest.mark.filterwarnings("error")
    def test_normal_pdf_far_tails_are_zero(self):
        np.testing.assert_allclose(normal_pdf([1e200, -1e200, 0.0]), [0.0, 0.0, 1.0 / SQRT_2PI])

    def test_linear(self):
        g = prob_linear(GaussianVector([0.0, 0.0], [1.0, 1.0]), DenseLayerParams([[2.0], [3.0]], [0.0]))
        np.testing.assert_allclose(g.variance, [13.0])

    def test_linear_with_zero_variance(self):
        params = DenseLayerParams([[1.0, -1.0], [0.5, 2.0]], [0.1, 0.2])
        g = prob_linear(GaussianVector.deterministic([1.0, 2.0]), params)
        np.testing.assert_allclose(g.mean, [2.1, 3.2])
        np.testing.assert_allclose(g.variance, [0.0, 0.0])

    def test_relu_standard_normal(self):
        g = prob_relu(GaussianVector([0.0], [1.0]))
        np.testing.assert_allclose(g.mean, [1.0 / SQRT_2PI], rtol=1e-12)
        np.testing.assert_allclose(g.variance, [0.5 - 1.0 / (2.0 * np.pi)], rtol=1e-12)
        np.testing.assert_allclose(g.mean, [0.39894], atol=1e-5)
        np.testing.assert_allclose(g.variance, [0.34085], atol=1e-5)

    def test_relu_far_from_kink(self):
        g = prob_relu(GaussianVector([10.0, -10.0], [1e-4, 1e-4]))
        np.testing.assert_allclose(g.mean, [10.0, 0.0], atol=1e-10)
        np.testing.assert_allclose(g.variance, [1e-4, 0.0], atol=1e-10)

    def test_relu_deterministic(self):
        g = prob_relu(GaussianVector.deterministic([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(g.mean, [0.0, 0.0, 3.0])
        np.testing.assert_array_equal(g.variance, [0.0, 0.0, 0.0])

    def test_batchnorm_identity(self):
        g = GaussianVector([1.0, -2.0], [0.5, 2.0])
        out = prob_batchnorm(g, BatchNormParams.identity(2, epsilon=0.0))
        np.testing.assert_allclose(out.mean, g.mean)
        np.testing.assert_allclose(out.variance, g.variance)

    def test_batchnorm_scales_variance(self):
        out = prob_batchnorm(GaussianVector([3.0], [1.0]), BatchNormParams([2.0], [0.0], [1.0], [1.0], 0.0))
        np.testing.assert_allclose(out.mean, [4.0])
        np.testing.assert_allclose(out.variance, [4.0])

    def test_max_pair_standard_normals(self):
        g = prob_max_pair(GaussianVector([0.0], [1.0]), GaussianVector([0.0], [1.0]))
        np.testing.assert_allclose(g.mean, [1.0 / np.sqrt(np.pi)], rtol=1e-12)
        np.testing.assert_allclose(g.variance, [1.0 - 1.0 / np.pi], rtol=1e-12)
        np.testing.assert_allclose(g.mean, [0.56419], atol=1e-5)
        np.testing.assert_allclose(g.variance, [0.68169], atol=1e-5)

    def test_max_pair_dominated(self):
        g = prob_max_pair(GaussianVector([10.0], [1e-4]), GaussianVector([0.0], [1e-4]))
        np.testing.assert_allclose(g.mean, [10.0], atol=1e-10)
        np.testing.assert_allclose(g.variance, [1e-4], atol=1e-10)

    def test_max_pair_equal_constants(self):
        g = prob_max_pair(GaussianVector.deterministic([1.5]), GaussianVector.deterministic([1.5]))
        np.testing.assert_array_equal(g.mean, [1.5])
        np.testing.assert_array_equal(g.variance, [0.0])

    def test_maxpool_single_point(self):
        g = GaussianVector([1.0, 2.0], [0.3, 0.4])
        out = prob_maxpool([g])
        np.testing.assert_array_equal(out.mean, g.mean)
        np.testing.assert_array_equal(out.variance, g.variance)

    def test_maxpool_deterministic_is_max_in_both_orders(self):
        points = [GaussianVector.deterministic(v) for v in ([1.0, 5.0], [3.0, -1.0], [2.0, 0.0])]
        for reverse in (False, True):
            out = prob_maxpool(points, reverse=reverse)
            np.testing.assert_array_equal(out.mean, [3.0, 5.0])
            np.testing.assert_array_equal(out.variance, [0.0, 0.0])

    def test_maxpool_empty(self):
        with pytest.raises(DomainError):
            prob_maxpool([])

    def test_negative_variance_rejected(self):
        with pytest.raises(DomainError):
            GaussianVector([0.0], [-1.0])


class TestForwardExpectation:
    def test_empty_subset_is_baseline_logit(self):
        model = build_model(1, 5, 2)
        z, z_bl = random_input(2, 5, 2), random_input(3, 5, 2)
        moments = prob_forward_expectation(z, lift_model(model), SubsetSpec(0), z_bl)
        assert moments.mean == pytest.approx(wdpn_forward(z_bl, model), abs=1e-9)
        assert moments.variance == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("mode", ["as_written", "bernoulli_point"])
    def test_degenerate_fidelity(self, mode):
        model = build_model(4, 6, 3)
        z, z_bl = random_input(5, 6, 3), random_input(6, 6, 3)
        prob = lift_model(model, mode)
        for i in range(9):
            moments = prob_forward_expectation(z, prob, SubsetSpec(8, forced_in=i), z_bl)
            assert moments.mean == pytest.approx(wdpn_forward(z, model), abs=1e-9)

    def test_forced_out_full_pool(self):
        model = build_model(7, 4, 1)
        z, z_bl = random_input(8, 4, 1), random_input(9, 4, 1)
        moments = prob_forward_expectation(z, lift_model(model), SubsetSpec(4, forced_out=2), z_bl)
        mask = np.ones((1, 5), dtype=bool)
        mask[0, 2] = False
        assert moments.mean == pytest.approx(masked_forward(z, z_bl, mask, model)[0], abs=1e-9)

    def test_counter_one_pass(self):
        counter = EvalCounter()
        model = build_model(1, 3, 0)
        z = random_input(2, 3, 0)
        prob_forward_expectation(z, lift_model(model), SubsetSpec(1), z, counter)
        assert counter.count == 1

    def test_lift_shares_parameters(self):
        model = build_model(1, 3, 0)
        prob = lift_model(model)
        assert prob.source is model
        assert lift_model(prob, "bernoulli_point").source is model


class TestExpectationDifference:
    def test_tabular_feature_of_linear_model(self):
        model = linear_tabular_model(3, [2.0, -1.0])
        z = HeterogeneousInput(np.random.default_rng(42).uniform(-1, 1, (3, 3)), [1.5, 4.0])
        z_bl = HeterogeneousInput(np.zeros((3, 3)), [0.0, 0.0])
        prob = lift_model(model)
        for k in range(5):
            assert expectation_difference(3, k, z, prob, z_bl) == pytest.approx(3.0, abs=1e-12)
            assert expectation_difference(4, k, z, prob, z_bl) == pytest.approx(-4.0, abs=1e-12)

    def test_null_point(self):
        model = build_model(10, 4, 1)
        z = random_input(11, 4, 1)
        points = z.points.copy()
        points[2] = 0.0
        z = HeterogeneousInput(points, z.tabular)
        z_bl = HeterogeneousInput(np.zeros((4, 3)), np.zeros(1))
        prob = lift_model(model)
        for k in range(5):
            assert expectation_difference(2, k, z, prob, z_bl) == pytest.approx(0.0, abs=1e-12)

    def test_two_passes_per_pair(self):
        model = build_model(12, 4, 2)
        z, z_bl = random_input(13, 4, 2), random_input(14, 4, 2)
        counter = EvalCounter()
        features = np.repeat(np.arange(6), 6)
        ks = np.tile(np.arange(6), 6)
        report = expectation_differences(z, lift_model(model), features, ks, z_bl, counter)
        assert counter.count == report.passes == 72
        assert report.values.shape == (36,)

    def test_threads_and_chunks_do_not_change_values(self):
        model = build_model(15, 5, 2)
        z, z_bl = random_input(16, 5, 2), random_input(17, 5, 2)
        prob = lift_model(model)
        features = np.repeat(np.arange(7), 7)
        ks = np.tile(np.arange(7), 7)
        one = expectation_differences(z, prob, features, ks, z_bl, threads=1, chunk_size=5)
        four = expectation_differences(z, prob, features, ks, z_bl, threads=4, chunk_size=5)
        np.testing.assert_array_equal(one.values, four.values)

    def test_bernoulli_never_clamps(self):
        model = build_model(18, 6, 1)
        z, z_bl = random_input(19, 6, 1), random_input(20, 6, 1)
        features = np.repeat(np.arange(7), 7)
        ks = np.tile(np.arange(7), 7)
        report = expectation_differences(z, lift_model(model, "bernoulli_point"), features, ks, z_bl)
        assert report.clamped == 0

    @pytest.mark.parametrize("mode", VARIANCE_MODES)
    @pytest.mark.parametrize("seed", range(5))
    def test_point_features_match_exhaustive_subset_average(self, seed, mode):
        model, z, baseline = relu_toy(seed, n_points=6, n_tabular=2)
        prob = lift_model(model, mode)
        ks = np.arange(model.n_features)
        for feature in range(model.n_points):
            predicted = expectation_differences(z, prob, np.full(ks.shape, feature), ks, baseline).values
            exact = [exhaustive_difference(model, z, baseline, feature, int(k)) for k in ks]
            np.testing.assert_allclose(predicted, exact, atol=Tolerances.GAUSSIAN_APPROXIMATION)

    def test_k_out_of_range(self):
        model = build_model(1, 3, 0)
        z = random_input(2, 3, 0)
        with pytest.raises(DomainError):
            expectation_difference(0, 3, z, lift_model(model), z)


class TestFoldOrder:
    def test_deterministic_passes_do_not_depend_on_order(self):
        model = build_model(21, 5, 0)
        z, z_bl = random_input(22, 5, 0), random_input(23, 5, 0)
        specs = [SubsetSpec(0), SubsetSpec(5)]
        assert fold_order_sensitivity(z, lift_model(model), z_bl, specs) == pytest.approx(0.0, abs=1e-12)

"""
Shared fixtures for the test suite.
"""

import os
import sys

import numpy as np
import pytest

# Add the repository root to the path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.nn_core import (BatchNormParams, DenseLayerParams,  # noqa: E402
                           HeterogeneousInput, PointLayer, WdpnModel)


def build_model(seed: int, n_points: int, n_tabular: int, widths=(6, 8),
                batchnorm: bool = True, fusion_scale: float = 1.0) -> WdpnModel:
    """Random WDPN with non-trivial batch-norm statistics"""
    rng = np.random.default_rng(seed)
    layers = []
    width = 3
    for out in widths:
        bn = None
        if batchnorm:
            bn = BatchNormParams(rng.uniform(0.5, 1.5, out), rng.normal(0, 0.2, out),
                                 rng.normal(0, 0.2, out), rng.uniform(0.5, 2.0, out))
        scale = 1.0 / np.sqrt(width)
        layers.append(PointLayer(DenseLayerParams(rng.uniform(-scale, scale, (width, out)),
                                                  rng.uniform(-0.2, 0.2, out)), bn, True))
        width = out
    fusion = DenseLayerParams(fusion_scale * rng.normal(0, 0.5, (width + n_tabular, 1)),
                              rng.normal(0, 0.1, 1))
    return WdpnModel(tuple(layers), fusion, n_points, n_tabular)


def random_input(seed: int, n_points: int, n_tabular: int) -> HeterogeneousInput:
    rng = np.random.default_rng(seed)
    return HeterogeneousInput(rng.uniform(-1, 1, (n_points, 3)), rng.normal(size=n_tabular))


def linear_tabular_model(n_points: int, weights, bias: float = 0.0, latent: int = 4) -> WdpnModel:
    """Point arm switched off: f = bias + w . x"""
    weights = np.asarray(weights, dtype=float)
    layer = PointLayer(DenseLayerParams(np.ones((3, latent)), np.zeros(latent)), None, True)
    fusion = DenseLayerParams(np.concatenate([np.zeros(latent), weights])[:, None], [bias])
    return WdpnModel((layer,), fusion, n_points, weights.shape[0])


class ProductModel:
    """f(z) = x_1 * x_2 with one inert point feature"""
    n_points = 1
    n_tabular = 2

    def masked_logits(self, z, z_baseline, masks, counter=None):
        masks = np.asarray(masks, dtype=bool)
        tabular = np.where(masks[:, 1:], z.tabular[None], z_baseline.tabular[None])
        if counter is not None:
            counter.increment(masks.shape[0])
        return tabular[:, 0] * tabular[:, 1]


@pytest.fixture
def model_factory():
    return build_model


@pytest.fixture
def input_factory():
    return random_input


@pytest.fixture
def product_model():
    return ProductModel()


@pytest.fixture
def product_input():
    return HeterogeneousInput(np.zeros((1, 3)), np.array([1.0, 1.0]))

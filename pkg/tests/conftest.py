import numpy as np
import pytest

from fedrecsim.kernel import MLPParams
from fedrecsim.model import GlobalParams, init_global_params
from fedrecsim.seeding import rng_for


def make_mlp(sizes, activations=None, seed=0, scale=0.5):
    """Small random network for unit tests."""
    rng = rng_for(seed)
    if activations is None:
        activations = ["relu"] * (len(sizes) - 2) + ["linear"]
    weights = [rng.normal(0, scale, size=(sizes[k + 1], sizes[k]))
               for k in range(len(sizes) - 1)]
    biases = [rng.normal(0, scale, size=sizes[k + 1]) for k in range(len(sizes) - 1)]
    return MLPParams(weights, biases, activations)


def make_global(num_items=6, dim=4, tower=(6, 3), seed=0) -> GlobalParams:
    # gaussian scheme: random biases keep relu pre-activations off the exact
    # kink, where finite differences and the subgradient convention disagree
    return init_global_params(num_items, dim, tower, rng_for(seed), sigma=0.5,
                              scheme="gaussian")


@pytest.fixture
def small_global():
    return make_global()


@pytest.fixture
def rng():
    return rng_for(12345)

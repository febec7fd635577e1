import numpy as np
import pytest

from priorforecast.forecaster import default_architecture, init_params
from priorforecast.scene_gen import WorldSpec, generate_scene


@pytest.fixture(scope="session")
def arch():
    return default_architecture()


@pytest.fixture(scope="session")
def params0(arch):
    return init_params(arch, np.random.default_rng(0))


@pytest.fixture(scope="session")
def mixed_scenes():
    """Two scenes per world template, fixed seeds."""
    specs = [
        WorldSpec("straight_multilane"),
        WorldSpec("curved_road"),
        WorldSpec("fork"),
        WorldSpec("four_way_intersection"),
    ]
    return [generate_scene(specs[i % 4], seed=300 + i) for i in range(8)]

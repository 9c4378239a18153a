import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from services.eigen_service import lowest_eigenpairs  # noqa: E402
from services.geometry_service import (  # noqa: E402
    antipodal_configuration,
    empty_configuration,
    pair_configuration,
    platonic_configuration,
)
from services.mesh_service import MeshParams, build_operators  # noqa: E402

# desk-scale meshes; tolerances in the tests are set for these sizes
TEST_PARAMS = MeshParams(background_count=2000, grade_depth=3, grade_radius=0.4)
SMALL_PARAMS = MeshParams(background_count=600, grade_depth=1, grade_radius=0.4)


@pytest.fixture(scope="session")
def antipodal():
    config = antipodal_configuration()
    ops = build_operators(config, TEST_PARAMS)
    pairs = lowest_eigenpairs(ops, 7, seed=0)
    return config, ops, pairs


@pytest.fixture(scope="session")
def untwisted():
    config = empty_configuration()
    ops = build_operators(config, TEST_PARAMS)
    pairs = lowest_eigenpairs(ops, 5, seed=0)
    return config, ops, pairs


@pytest.fixture(scope="session")
def small_antipodal():
    config = antipodal_configuration()
    return config, build_operators(config, SMALL_PARAMS)


@pytest.fixture(scope="session")
def close_pair():
    config = pair_configuration(1.2)
    ops = build_operators(config, TEST_PARAMS)
    pairs = lowest_eigenpairs(ops, 3, seed=0)
    return config, ops, pairs


@pytest.fixture(scope="session")
def tetrahedron():
    config = platonic_configuration("tetrahedron")
    return config, build_operators(config, SMALL_PARAMS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

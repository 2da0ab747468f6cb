import numpy as np
import pytest

from artifact.complement import whitney_decompose
from artifact.geometry import gen_four_corners_cantor, gen_plane


@pytest.fixture(scope="session")
def plane_coarse():
    return gen_plane(2, 1.0, 0.125)


@pytest.fixture(scope="session")
def plane_whitney(plane_coarse):
    return whitney_decompose(plane_coarse)


@pytest.fixture(scope="session")
def cantor3():
    return gen_four_corners_cantor(3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

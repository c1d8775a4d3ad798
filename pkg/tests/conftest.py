import numpy as np
import pytest

from qdyn.fields import build_potentials
from qdyn.geometry import FlatChart, Torus
from qdyn.operators import GridSpec


@pytest.fixture(scope="session")
def torus():
    return Torus(2.0, 1.0)


@pytest.fixture(scope="session")
def flat():
    return FlatChart()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pots_plain():
    """W = y^2, no fields."""
    return build_potentials({"kind": "y2"}, {}, {})


@pytest.fixture(scope="session")
def pots_flagship():
    """W = y^2, A = (0.3 sin x2, 0, 0.5), V = 0.2 cos x1."""
    return build_potentials(
        {"kind": "y2"},
        {"tangential": {"kind": "sin_x2", "a": 0.3},
         "normal": {"kind": "const", "c": 0.5}},
        {"kind": "cos_x1", "v0": 0.2},
    )


@pytest.fixture
def small_grid(torus):
    return GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=8.0).bind(torus)


@pytest.fixture
def small_grid_flat(flat):
    return GridSpec(n1=8, n2=8, ny=40, Y=8.0, lam=2.0).bind(flat)

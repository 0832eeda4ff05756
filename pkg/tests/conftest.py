import numpy as np
import pytest

from tetradg import basis
from tetradg.equations import Material

_REFMATS = {}


def refmats(order):
    if order not in _REFMATS:
        _REFMATS[order] = basis.assemble_reference_matrices(order)
    return _REFMATS[order]


@pytest.fixture(scope="session")
def mats_o3():
    return refmats(3)


@pytest.fixture(scope="session")
def mats_o2():
    return refmats(2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def rock():
    return Material.from_velocities(rho=1.0, vp=2.0, vs=1.0)


@pytest.fixture
def loh3_layer():
    return Material.from_velocities(rho=2600.0, vp=4000.0, vs=2000.0, qp=120.0, qs=40.0)

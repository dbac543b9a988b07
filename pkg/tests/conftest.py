import numpy as np
import pytest

from metareflect import dynamics, fields


@pytest.fixture(scope="session")
def six_eq():
    return fields.disk_six_equilibria()


@pytest.fixture(scope="session")
def six_eq_points(six_eq):
    return dynamics.find_equilibria(six_eq)


@pytest.fixture(scope="session")
def two_wells():
    return fields.disk_two_wells()


@pytest.fixture(scope="session")
def two_well_points(two_wells):
    return dynamics.find_equilibria(two_wells)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

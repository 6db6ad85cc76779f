import numpy as np
import pytest

from mkvctl.control_opt import enumerate_step_controls
from mkvctl.forward_sim import GaussianSampler
from mkvctl.problem import get_problem


@pytest.fixture(scope="session")
def toy():
    return get_problem("two-action-toy")


@pytest.fixture(scope="session")
def toy_catalog(toy):
    return enumerate_step_controls(toy.space, 2, 1, horizon=toy.horizon)


@pytest.fixture(scope="session")
def toy_pi():
    return GaussianSampler(0.0, 0.5)


@pytest.fixture
def x0():
    return np.zeros(1)

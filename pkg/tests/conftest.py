import numpy as np
import pytest

from ctrl_diffuse.schedule import NoiseSchedule, TimeGrid


@pytest.fixture
def linear():
    return NoiseSchedule.linear(0.1, 20.0, 1.0)


@pytest.fixture
def unit_constant():
    return NoiseSchedule.constant(1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid16():
    return TimeGrid(16, 1.0)

import numpy as np
import pytest

from viinit.imu import ImuBias
from viinit.simulator import SimulationConfig, simulate

INJECTED_BIAS = ImuBias([0.02, -0.01, 0.03], [0.1, 0.0, -0.05])


@pytest.fixture(scope="session")
def noise_free_dataset():
    return simulate(SimulationConfig(true_bias=INJECTED_BIAS).noise_free())


@pytest.fixture(scope="session")
def noisy_dataset():
    return simulate(SimulationConfig(seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

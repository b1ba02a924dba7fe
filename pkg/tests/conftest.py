import numpy as np
import pytest

from rbdsde.paths import build_grid, sample_noise


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(1.0, 40)


@pytest.fixture(scope="session")
def small_noise(small_grid):
    return sample_noise(small_grid, 4000, seed=101)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.Philox(key=[424242, 0]))

import numpy as np
import pytest

from proseco.config import RunConfig
from proseco.train import synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return RunConfig.desk(iterations=6, num_scenes=6, checkpoint_every=2)


@pytest.fixture(scope="session")
def small_dataset(small_cfg):
    # Selective Search over a handful of scenes is the slow part; share it.
    return synthetic_dataset(small_cfg)

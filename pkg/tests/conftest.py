import numpy as np
import pytest

from morphopt.env import EnvConfig
from morphopt.terrain import TerrainParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def flat_config():
    """Fast flat-terrain environment configuration shared by env-level tests."""
    return EnvConfig(terrain=TerrainParams(kind="flat", difficulty=0.0))

"""Shared fixtures for the marmamba test suite."""

import numpy as np
import pytest

from src.models.backbone import MARMamba, NetConfig
from src.tensor.tensor import set_default_dtype
from src.utils.logger import shutdown_logging


@pytest.fixture(autouse=True)
def float64_tensors():
    """Every test starts (and ends) with float64 tensors."""
    set_default_dtype("float64")
    yield
    set_default_dtype("float64")
    shutdown_logging()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    return NetConfig(base_channels=4, stage_blocks=(1,) * 8)


@pytest.fixture
def micro_net(micro_config):
    return MARMamba(micro_config, seed=0)

import numpy as np
import pytest

from dccmapf.model import DCCModel, ModelConfig

SMALL = ModelConfig(conv_channels=(4, 4, 8, 8), hidden=12, pos_embed=4, heads=2, key_dim=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_model():
    return DCCModel(SMALL, seed=7)

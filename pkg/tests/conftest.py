import numpy as np
import pytest

from hazeguard.net import NetConfig, build


@pytest.fixture
def tiny_cfg():
    return NetConfig(embed_dim=8, num_blocks=2, num_heads=2, patch_size=2, window_size=4, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build(tiny_cfg)


@pytest.fixture
def tiny_model64(tiny_cfg):
    return build(tiny_cfg).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

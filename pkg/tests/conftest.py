"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.
"""

import pytest
import torch

from sedsr.core.semantic_extractor import build_extractor, make_toy_extractor
from sedsr.core.settings import desk_preset


@pytest.fixture
def tiny_settings():
    """极小的桌面配置：每步只需几十毫秒"""
    return desk_preset().with_overrides({
        "gen.num_rrdb_blocks": 1,
        "gen.feature_channels": 8,
        "gen.growth_channels": 4,
        "disc.base_channels": 8,
        "data.n_images": 2,
        "data.hr_size": 64,
        "data.patch_size": 32,
        "train.batch_size": 2,
        "train.iterations": 4,
        "train.log_interval": 1,
        "train.checkpoint_interval": 2,
        "train.eval_images": 1,
        "train.plot_curves": False,
    }).validate()


@pytest.fixture
def toy_extractor():
    spec, weights = make_toy_extractor(seed=3)
    return build_extractor(spec, weights)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def hr_batch(rng):
    """2x3x32x32，取值 [0,1]"""
    return torch.rand(2, 3, 32, 32, generator=rng)

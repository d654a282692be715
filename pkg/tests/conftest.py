import logging

import numpy as np
import pytest
import torch

from vidinsert.model import DenoiserAssembly, ModelConfig

# trajectory selection warns whenever a sprite has fewer than 8 keypoints
logging.getLogger("vidinsert.trajectory").setLevel(logging.ERROR)


def tiny_config(**kw) -> ModelConfig:
    base = dict(width=32, channels=(16, 32, 32), heads=2, n_tokens=4, ref_size=32, warp_width=16, ae_channels=(8, 16, 32))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return DenoiserAssembly(tiny_config()).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)

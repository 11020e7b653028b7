import pytest
import torch

from latent_bridge.config import ModelDims, config_from_dict
from latent_bridge.data import generate_splits
from latent_bridge.training import pretrain_toy_backbone

# 32x32 images, patch 8 -> a 4x4 grid of 16 tokens. Small enough for a CPU test run.
TINY_DIMS = {
    "image_size": 32,
    "patch_size": 8,
    "embed_dim": 8,
    "encoder_mixing_layers": 1,
    "num_layers": 2,
    "num_heads": 2,
    "mlp_ratio": 2,
    "vocab_size": 64,
    "max_text_len": 16,
    "dm_width": 16,
    "dm_heads": 2,
    "dm_double_blocks": 2,
    "dm_single_blocks": 1,
    "cn_double_blocks": 2,
    "cn_single_blocks": 1,
    "downsample_width": 8,
}

TINY_CONFIG = {
    "seed": 0,
    "learning_rate": 1e-3,
    "batch_size": 4,
    "pretrain_steps": 2,
    "branch_steps": 3,
    "controlnet_steps": 3,
    "dataset_size": 16,
    "val_size": 4,
    "log_every": 0,
    "dims": TINY_DIMS,
    "sampler": {"inference_steps": 2, "decode_steps": 4, "conditioning_scale": 0.7, "seed": 0},
}


def tiny_config(**overrides):
    return config_from_dict({**TINY_CONFIG, **overrides})


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture(scope="session")
def splits():
    return generate_splits(0, TINY_CONFIG["dataset_size"], TINY_CONFIG["val_size"], 32, 16)


@pytest.fixture(scope="session")
def pretrained(splits):
    """Shared pretrained stack. Tests that mutate it must work on `.clone()`."""
    stack, result = pretrain_toy_backbone(tiny_config(), splits[0])
    return stack, result


@pytest.fixture
def stack(pretrained):
    return pretrained[0].clone()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(1234)


@pytest.fixture
def dims():
    return ModelDims(**TINY_DIMS)


@pytest.fixture
def make_config():
    return tiny_config

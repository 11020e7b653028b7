"""
Trend and threshold checks on the default budget (infrastructure/config.yaml). Minutes on CPU: run with -m slow.
"""
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from latent_bridge.checkpoint import load_checkpoint
from latent_bridge.config import load_config
from latent_bridge.data import generate_splits
from latent_bridge.flow import latents_to_images
from latent_bridge.harness import (
    DEFAULT_VARIANT,
    VARIANTS,
    BenchContext,
    Budget,
    compare_variants,
    reconstruct_images,
    sweep_decoding_steps,
    sweep_token_count,
    train_bridge,
    trend_summary,
)
from latent_bridge.metrics import psnr
from latent_bridge.rundir import BRANCH_CKPT, CONTROLNET_CKPT, PRETRAIN_CKPT
from latent_bridge.sampling import sample_unconditional
from latent_bridge.training import branch_validation_loss, pretrain_toy_backbone, train_generation_branch
from scripts.run_pipeline import DEFAULT_DEFINITION, run_state_machine

pytestmark = pytest.mark.slow

INFRA = Path(__file__).resolve().parents[1] / "infrastructure"
SEEDS = [0, 1, 2]


@pytest.fixture(scope="module")
def default_config():
    return load_config(str(INFRA / "config.yaml"))


@pytest.fixture(scope="module")
def default_splits(default_config):
    dims = default_config.dims
    return generate_splits(
        default_config.seed, default_config.dataset_size, default_config.val_size, dims.image_size, dims.max_text_len
    )


@pytest.fixture(scope="module")
def default_pretrained(default_config, default_splits):
    return pretrain_toy_backbone(default_config, default_splits[0])


@pytest.fixture
def default_context(default_config, default_splits, default_pretrained):
    train, val = default_splits
    return BenchContext(default_config, train, val, default_pretrained[0])


# --- TRAINING THRESHOLDS ---

def test_pretraining_halves_the_loss(default_pretrained):
    history = default_pretrained[1].history
    assert np.mean(history[-10:]) < 0.5 * history[0]


def test_branch_training_cuts_held_out_masked_mse(default_config, default_splits, default_pretrained):
    stack = default_pretrained[0].clone()
    val = default_splits[1]
    before = branch_validation_loss(stack, val, seed=0)
    train_generation_branch(default_config, default_splits[0], stack)
    assert branch_validation_loss(stack, val, seed=0) < 0.6 * before


def test_controlnet_reconstruction_beats_unconditional_sampling(default_config, default_context):
    budget = Budget(0, default_config.controlnet_steps, default_config.batch_size)
    bridge = train_bridge(default_context, DEFAULT_VARIANT, budget, seed=0)
    val = default_context.val
    recon = reconstruct_images(bridge, val.images, val.tokens, seed=0)
    with torch.no_grad():
        latents = sample_unconditional(
            bridge.stack.backbone, val.tokens, steps=default_config.sampler.inference_steps, seed=0
        )
    baseline = latents_to_images(latents, default_config.dims.patch_size)
    assert psnr(recon.images, val.images) >= psnr(baseline, val.images) + 3.0


@torch.no_grad()
def understanding_outputs(mllm, count=50, seed=0):
    gen = torch.Generator().manual_seed(seed)
    half = count // 2
    vocab = mllm.text_embed.num_embeddings
    texts = torch.randint(4, vocab, (count - half, 10), generator=gen)
    grids = torch.randn(half, *mllm.grid_shape, generator=gen)
    captions = torch.randint(4, vocab, (half, 6), generator=gen)
    return mllm.text_logits(texts), mllm.caption_logits(grids, captions)


def test_full_branch_training_leaves_understanding_bitwise_identical(default_config, default_splits,
                                                                     default_pretrained):
    stack = default_pretrained[0].clone()
    text_before, caption_before = understanding_outputs(stack.mllm)
    frozen_before = stack.frozen_checksum()
    train_generation_branch(default_config, default_splits[0], stack)
    text_after, caption_after = understanding_outputs(stack.mllm)
    assert stack.frozen_checksum() == frozen_before
    assert torch.equal(text_after, text_before)
    assert torch.equal(caption_after, caption_before)


# --- TRENDS ---

def test_clip_latent_beats_other_variants(default_config, default_context):
    rows = compare_variants(VARIANTS, Budget.from_config(default_config), SEEDS, default_context)
    assert trend_summary(rows)["variants_ordering"] is True


def test_reconstruction_improves_with_token_count(default_config, default_context):
    rows = sweep_token_count([4, 16, 64], Budget.from_config(default_config), SEEDS, default_context)
    assert trend_summary(rows)["token_count_monotone"] is True


def test_few_decoding_steps_are_robust_and_faster(default_config, default_context):
    rows = sweep_decoding_steps([1, 8, 64], Budget.from_config(default_config), SEEDS, default_context)
    summary = trend_summary(rows)
    assert summary["decode_steps_robust"] is True
    assert summary["decode_steps_faster"] is True


# --- DETERMINISM ---

def _scores(outcome):
    metrics = outcome["data"]["evalResult"]["metrics"]
    return {key: {k: v for k, v in report.items() if k != "wall_clock"} for key, report in metrics.items()}


def test_pipeline_is_deterministic_end_to_end(tmp_path):
    definition = json.loads(DEFAULT_DEFINITION.read_text())
    runs = [tmp_path / "first", tmp_path / "second"]
    outcomes = [run_state_machine(definition, {"out": str(run), "config": str(INFRA / "smoke.yaml")}) for run in runs]
    assert all(o["status"] == "SUCCEEDED" for o in outcomes), outcomes

    for name in (PRETRAIN_CKPT, BRANCH_CKPT, CONTROLNET_CKPT):
        first, second = (load_checkpoint(run / "checkpoints" / f"{name}.pt") for run in runs)
        assert first.checksum() == second.checksum(), name
    images = [np.load(run / "generated" / "images.npy") for run in runs]
    assert np.array_equal(images[0], images[1])
    assert _scores(outcomes[0]) == _scores(outcomes[1])

import pytest
import torch

from latent_bridge.errors import ConfigError
from latent_bridge.flow import latents_to_images
from latent_bridge.harness import (
    DEFAULT_VARIANT,
    VARIANTS,
    BenchContext,
    Budget,
    bridge_encoder_for,
    check_decode_steps,
    check_token_count,
    check_variant,
    compare_variants,
    generate_images,
    metric_means,
    reconstruct_images,
    sweep_decoding_steps,
    sweep_token_count,
    train_bridge,
    trend_summary,
)
from latent_bridge.latent import RawPixelEncoder
from latent_bridge.reports import ReportRow
from latent_bridge.sampling import sample_unconditional

ZERO = Budget(0, 0, 4)
SMALL = Budget(1, 1, 4)


@pytest.fixture
def context(config, splits, pretrained):
    train, val = splits
    return BenchContext(config, train, val, pretrained[0])


def _row(sweep, key, seed, psnr=10.0, frechet=1.0, wall=1.0):
    return ReportRow(sweep, str(key), seed, DEFAULT_VARIANT, 16, 4, 0.1, 0.1, psnr, 0.5, frechet, wall, "cfg", "bh")


def test_budget(config):
    budget = Budget.from_config(config)
    assert budget == Budget(3, 3, 4)
    assert budget.total_steps == 6
    applied = Budget(5, 1, 2).apply(config)
    assert (applied.branch_steps, applied.controlnet_steps, applied.batch_size) == (5, 1, 2)
    assert applied.dims == config.dims


def test_validators():
    assert check_variant("cross-attn") == "cross-attn"
    assert check_token_count(4, 4) == 4
    assert check_decode_steps(16, 16) == 16
    with pytest.raises(ConfigError):
        check_variant("vae-latent")
    for count in (0, 1, 3, 9):
        with pytest.raises(ConfigError):
            check_token_count(count, 4)
    for steps in (0, 17):
        with pytest.raises(ConfigError):
            check_decode_steps(steps, 16)


def test_bridge_encoders(stack):
    images = torch.rand(2, 3, 32, 32)
    assert bridge_encoder_for("clip-latent", stack, 0) is stack.encoder
    assert isinstance(bridge_encoder_for("raw-pixel-latent", stack, 0), RawPixelEncoder)
    other = bridge_encoder_for("nonaligned-encoder", stack, 0)
    assert other is not stack.encoder
    with torch.no_grad():
        assert not torch.allclose(other(images), stack.encoder(images))
    for variant in VARIANTS:
        encoder = bridge_encoder_for(variant, stack, 0)
        assert not any(p.requires_grad for p in encoder.parameters())


def test_nonaligned_encoder_leaves_global_rng_alone(stack):
    before = torch.random.get_rng_state()
    bridge_encoder_for("nonaligned-encoder", stack, 3)
    assert torch.equal(torch.random.get_rng_state(), before)


def test_zero_budget_bridge_generates_like_the_unconditional_backbone(context):
    bridge = train_bridge(context, DEFAULT_VARIANT, ZERO, seed=0)
    assert bridge.batch_hashes == []
    assert bridge.token_count == 16
    generation = generate_images(bridge, context.val.tokens, seed=0)
    expected = sample_unconditional(bridge.stack.backbone, context.val.tokens, steps=2, seed=0)
    assert torch.equal(generation.images, latents_to_images(expected, 8))
    assert generation.images.shape == (4, 3, 32, 32)


def test_training_a_bridge_leaves_the_shared_stack_untouched(context):
    before = {k: v.clone() for k, v in context.stack.mllm.state_dict().items()}
    bridge = train_bridge(context, DEFAULT_VARIANT, SMALL, seed=0)
    assert len(bridge.batch_hashes) == 2
    assert "train" in bridge.wall_clock
    for key, value in context.stack.mllm.state_dict().items():
        assert torch.equal(value, before[key])
    assert not torch.equal(bridge.stack.mllm.vision_head.weight, context.stack.mllm.vision_head.weight)


def test_generation_schedule_and_determinism(context):
    bridge = train_bridge(context, DEFAULT_VARIANT, ZERO, seed=0)
    first = generate_images(bridge, context.val.tokens, decode_steps=3, seed=5)
    second = generate_images(bridge, context.val.tokens, decode_steps=3, seed=5)
    assert len(first.schedule) == 3
    assert sorted(i for step in first.schedule for i in step) == list(range(16))
    assert torch.equal(first.images, second.images)
    assert first.grids.shape == (4, 8, 4, 4)
    assert {"decode", "diffusion"} <= set(first.wall_clock)
    with pytest.raises(ConfigError):
        generate_images(bridge, context.val.tokens, decode_steps=17)


def test_pooled_bridge_and_reconstruction(context):
    bridge = train_bridge(context, DEFAULT_VARIANT, ZERO, seed=0, token_count=4)
    assert bridge.token_count == 4
    generation = reconstruct_images(bridge, context.val.images, context.val.tokens)
    assert generation.grids.shape == (4, 8, 2, 2)
    assert generation.schedule is None


def test_cross_attn_and_query_variants(context):
    cross = train_bridge(context, "cross-attn", ZERO, seed=0)
    assert cross.adapter is not None and cross.controlnet is None
    with pytest.raises(ConfigError):
        reconstruct_images(cross, context.val.images, context.val.tokens)
    assert generate_images(cross, context.val.tokens).images.shape == (4, 3, 32, 32)

    queries = train_bridge(context, "query-tokens", ZERO, seed=0, token_count=4)
    assert queries.queries is not None
    generation = generate_images(queries, context.val.tokens)
    assert generation.schedule is None
    assert generation.grids.shape == (4, 8, 2, 2)


def test_compare_variants_at_equal_budget(context):
    variants = ["clip-latent", "raw-pixel-latent", "query-tokens"]
    rows = compare_variants(variants, SMALL, [0], context)
    assert [r.key for r in rows] == variants
    assert len({r.batch_hash for r in rows}) == 1
    assert len({r.config_hash for r in rows}) == 1
    with pytest.raises(ConfigError):
        compare_variants(["clip-latent", "dalle"], SMALL, [0], context)


def test_token_count_sweep(context):
    rows = sweep_token_count([4, 16], SMALL, [0], context)
    assert [r.token_count for r in rows] == [4, 16]
    assert len({r.config_hash for r in rows}) == 1
    assert len({r.batch_hash for r in rows}) == 1


@pytest.mark.parametrize("counts", [[1], [4, 1]])
def test_token_count_sweep_rejects_grids_the_controlnet_cannot_take(context, counts):
    with pytest.raises(ConfigError):
        sweep_token_count(counts, SMALL, [0], context)


def test_decoding_step_sweep(context):
    rows = sweep_decoding_steps([1, 4, 16], SMALL, [0], context)
    assert [r.decode_steps for r in rows] == [1, 4, 16]
    assert [r.key for r in rows] == ["1", "4", "16"]
    assert len({r.config_hash for r in rows}) == 1
    assert len({r.batch_hash for r in rows}) == 1
    assert all(r.wall_clock_s > 0 for r in rows)
    with pytest.raises(ConfigError):
        sweep_decoding_steps([0], SMALL, [0], context)


def test_trend_summary():
    rows = []
    for seed, ours in ((0, 20.0), (1, 20.0), (2, 5.0)):
        rows.append(_row("variants", "clip-latent", seed, psnr=ours, frechet=1.0 if ours > 10 else 9.0))
        rows.append(_row("variants", "raw-pixel-latent", seed, psnr=10.0, frechet=2.0))
        for count, value in ((1, 8.0), (4, 9.0), (16, 9.0)):
            rows.append(_row("token-count", count, seed, psnr=value))
        for steps, frechet, wall in ((1, 3.0, 0.1), (8, 1.1, 0.4), (64, 1.0, 2.0)):
            rows.append(_row("decode-steps", steps, seed, frechet=frechet, wall=wall))
    summary = trend_summary(rows)
    assert summary == {
        "variants_ordering": True,
        "token_count_monotone": True,
        "decode_steps_robust": True,
        "decode_steps_faster": True,
    }


def test_trend_summary_failures_and_absence():
    rows = [
        _row("token-count", 1, 0, psnr=9.0),
        _row("token-count", 16, 0, psnr=8.0),
        _row("decode-steps", 1, 0, frechet=1.2),
        _row("decode-steps", 8, 0, frechet=2.0),
        _row("decode-steps", 64, 0, frechet=1.0),
    ]
    summary = trend_summary(rows)
    assert summary["token_count_monotone"] is False
    assert summary["decode_steps_robust"] is False
    assert summary["variants_ordering"] is None
    assert trend_summary([]) == dict.fromkeys(summary)


def test_metric_means():
    rows = [_row("variants", "a", 0, psnr=1.0), _row("variants", "a", 1, psnr=3.0), _row("variants", "b", 0)]
    assert metric_means(rows, "psnr") == {"a": 2.0, "b": 10.0}


@pytest.mark.slow
def test_decoding_step_trend_on_smoke_budget(make_config, splits, pretrained):
    config = make_config(branch_steps=40, controlnet_steps=40)
    context = BenchContext(config, splits[0], splits[1], pretrained[0])
    rows = sweep_decoding_steps([1, 4, 16], Budget.from_config(config), [0, 1, 2], context)
    summary = trend_summary(rows)
    assert summary["decode_steps_faster"] is True
    means = metric_means(rows, "toy_frechet")
    assert set(means) == {"1", "4", "16"}

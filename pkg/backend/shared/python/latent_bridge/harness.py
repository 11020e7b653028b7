"""
Bench harness: bridge variants, token-count and decoding-step sweeps, trend checks.

Every sweep cell starts from a private copy of one pretrained stack, so cells never see each
other's training. Rows carry the config hash with the swept key (and the seed) removed; equal
hashes prove the rest of the configuration was held fixed.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import TrainConfig, config_hash
from .controlnet import CrossAttentionAdapter, LatentControlNet
from .data import SyntheticDataset
from .errors import ConfigError
from .flow import latents_to_images
from .latent import RawPixelEncoder, build_encoder, resize_grid_tokens
from .mar import build_inference_schedule, mar_generate
from .metrics import MetricReport, compute_metrics
from .reports import ReportRow
from .sampling import cross_attention_condition, sample_image
from .training import (
    PretrainedStack,
    QueryTokens,
    train_cross_adapter,
    train_generation_branch,
    train_latent_controlnet,
    train_query_token_bridge,
)
from .utils import STREAM_SCHEDULE, compute_hash, step_rng

logger = logging.getLogger(__name__)

VARIANTS = ("clip-latent", "query-tokens", "raw-pixel-latent", "nonaligned-encoder", "cross-attn")
DEFAULT_VARIANT = "clip-latent"
NONALIGNED_SEED_OFFSET = 7919


@dataclass(frozen=True)
class Budget:
    """Training budget shared by every variant of a comparison."""
    branch_steps: int
    controlnet_steps: int
    batch_size: int

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Budget":
        return cls(config.branch_steps, config.controlnet_steps, config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.branch_steps + self.controlnet_steps

    def apply(self, config: TrainConfig) -> TrainConfig:
        return replace(
            config, branch_steps=self.branch_steps, controlnet_steps=self.controlnet_steps, batch_size=self.batch_size
        )


@dataclass
class BenchContext:
    config: TrainConfig
    train: SyntheticDataset
    val: SyntheticDataset
    stack: PretrainedStack


@dataclass
class BridgeModel:
    """A trained bridge: what turns captions into a conditioning signal for the backbone."""
    variant: str
    stack: PretrainedStack
    encoder: nn.Module
    controlnet: Optional[LatentControlNet] = None
    adapter: Optional[CrossAttentionAdapter] = None
    queries: Optional[QueryTokens] = None
    token_count: int = 0
    batch_hashes: List[str] = field(default_factory=list)
    wall_clock: Dict[str, float] = field(default_factory=dict)


@dataclass
class Generation:
    images: torch.Tensor
    grids: Optional[torch.Tensor]
    schedule: Optional[List[List[int]]]
    wall_clock: Dict[str, float]


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ConfigError(f"Unknown variant '{variant}'. Known: {', '.join(VARIANTS)}")
    return variant


def check_token_count(count: int, grid_side: int) -> int:
    """Bridge token counts are perfect squares whose side divides the grid and is even (ControlNet stride 2)."""
    side = int(round(count ** 0.5)) if count > 0 else 0
    if side <= 0 or side * side != count or grid_side % side:
        raise ConfigError(f"Token count {count} is not a perfect square fitting a {grid_side}x{grid_side} grid")
    if side % 2:
        raise ConfigError(f"Token count {count} gives a {side}x{side} grid the ControlNet cannot downsample by 2")
    return count


def check_decode_steps(steps: int, num_tokens: int) -> int:
    if not 1 <= steps <= num_tokens:
        raise ConfigError(f"Decoding steps {steps} must lie in [1, {num_tokens}]")
    return steps


def bridge_encoder_for(variant: str, stack: PretrainedStack, seed: int) -> nn.Module:
    """The encoder whose grids the bridge carries for this variant. Always frozen."""
    dims = stack.config.dims
    if variant == "raw-pixel-latent":
        encoder = RawPixelEncoder(dims.patch_size, dims.embed_dim, seed=seed)
    elif variant == "nonaligned-encoder":
        with torch.random.fork_rng():
            encoder = build_encoder(dims, seed + NONALIGNED_SEED_OFFSET)
    else:
        encoder = stack.encoder
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder


def _timed(fn: Callable, clock: Dict[str, float], key: str):
    start = time.perf_counter()
    out = fn()
    clock[key] = clock.get(key, 0.0) + time.perf_counter() - start
    return out


# --- TRAINING A BRIDGE ---

def train_bridge(context: BenchContext, variant: str, budget: Budget, seed: int, token_count: int = 0) -> BridgeModel:
    """
    Train one variant from a private copy of the pretrained stack under `budget`.

    clip-latent / raw-pixel-latent / nonaligned-encoder: masked-MSE branch training on the bridge
    encoder's grids, then a latent ControlNet teacher-forced on the same grids.
    cross-attn: the same branch, then a cross-attention adapter instead of the ControlNet.
    query-tokens: queries + generation branch + ControlNet jointly through the flow loss.
    """
    check_variant(variant)
    config = replace(budget.apply(context.config), seed=seed)
    count = check_token_count(token_count or config.bridge_tokens, config.dims.grid_side)
    stack = context.stack.clone()
    stack.config = config
    encoder = bridge_encoder_for(variant, stack, seed)
    clock: Dict[str, float] = {}
    logger.info(f"🚀 Training variant '{variant}' seed={seed} tokens={count} budget={budget}")

    if variant == "query-tokens":
        queries, cn, result = _timed(
            lambda: train_query_token_bridge(config, context.train, stack, token_count=count), clock, "train"
        )
        return BridgeModel(variant, stack, encoder, controlnet=cn, queries=queries, token_count=count,
                           batch_hashes=result.batch_hashes, wall_clock=clock)

    branch = _timed(
        lambda: train_generation_branch(config, context.train, stack, bridge_encoder=encoder), clock, "train"
    )
    if variant == "cross-attn":
        cond = _timed(lambda: train_cross_adapter(config, context.train, stack, token_count=count), clock, "train")
        return BridgeModel(variant, stack, encoder, adapter=cond.module, token_count=count,
                           batch_hashes=branch.batch_hashes + cond.batch_hashes, wall_clock=clock)

    cond = _timed(
        lambda: train_latent_controlnet(config, context.train, stack, bridge_encoder=encoder, token_count=count),
        clock, "train",
    )
    return BridgeModel(variant, stack, encoder, controlnet=cond.module, token_count=count,
                       batch_hashes=branch.batch_hashes + cond.batch_hashes, wall_clock=clock)


# --- GENERATION ---

@torch.no_grad()
def generate_images(
    bridge: BridgeModel,
    text_tokens: torch.Tensor,
    decode_steps: Optional[int] = None,
    inference_steps: Optional[int] = None,
    scale: Optional[float] = None,
    seed: Optional[int] = None,
) -> Generation:
    """
    Captions -> images. Grid variants decode the bridge grid with masked autoregression under a
    random cosine schedule, pool it to the bridge token count and condition the backbone on it.
    """
    sampler = bridge.stack.config.sampler
    decode_steps = sampler.decode_steps if decode_steps is None else decode_steps
    inference_steps = sampler.inference_steps if inference_steps is None else inference_steps
    scale = sampler.conditioning_scale if scale is None else scale
    seed = sampler.seed if seed is None else seed
    stack, clock = bridge.stack, {}
    patch = stack.config.dims.patch_size

    if bridge.queries is not None:
        grids, schedule = _timed(lambda: bridge.queries(stack.mllm, text_tokens), clock, "decode"), None
    else:
        _, h, w = stack.mllm.grid_shape
        check_decode_steps(decode_steps, h * w)
        plan = build_inference_schedule(step_rng(seed, 0, STREAM_SCHEDULE), h * w, decode_steps)
        full = _timed(lambda: mar_generate(text_tokens, stack.mllm, plan), clock, "decode")
        grids, schedule = resize_grid_tokens(full, bridge.token_count), plan.to_lists()

    if bridge.adapter is not None:
        latents = _timed(
            lambda: cross_attention_condition(stack.backbone, bridge.adapter, grids, text_tokens,
                                              steps=inference_steps, scale=scale, seed=seed),
            clock, "diffusion",
        )
    else:
        latents = _timed(
            lambda: sample_image(stack.backbone, bridge.controlnet, grids, text_tokens,
                                 steps=inference_steps, scale=scale, seed=seed),
            clock, "diffusion",
        )
    return Generation(latents_to_images(latents, patch), grids, schedule, clock)


@torch.no_grad()
def reconstruct_images(
    bridge: BridgeModel,
    images: torch.Tensor,
    text_tokens: torch.Tensor,
    inference_steps: Optional[int] = None,
    scale: Optional[float] = None,
    seed: Optional[int] = None,
) -> Generation:
    """Condition on the ground-truth bridge grids of `images` (no autoregression)."""
    if bridge.controlnet is None or bridge.queries is not None:
        raise ConfigError(f"Variant '{bridge.variant}' has no grid ControlNet to reconstruct with")
    sampler = bridge.stack.config.sampler
    clock: Dict[str, float] = {}
    grids = resize_grid_tokens(bridge.encoder(images), bridge.token_count)
    latents = _timed(
        lambda: sample_image(
            bridge.stack.backbone, bridge.controlnet, grids, text_tokens,
            steps=sampler.inference_steps if inference_steps is None else inference_steps,
            scale=sampler.conditioning_scale if scale is None else scale,
            seed=sampler.seed if seed is None else seed,
        ),
        clock, "diffusion",
    )
    return Generation(latents_to_images(latents, bridge.stack.config.dims.patch_size), grids, None, clock)


def evaluate_generation(bridge: BridgeModel, generation: Generation, reference: SyntheticDataset) -> MetricReport:
    """Metrics against the reference images; grid error is measured in the bridge encoder's space."""
    ref_grids, gen_grids = None, None
    if generation.grids is not None and bridge.queries is None:
        with torch.no_grad():
            ref_grids = resize_grid_tokens(bridge.encoder(reference.images), bridge.token_count)
        gen_grids = generation.grids
    clock = {**bridge.wall_clock, **generation.wall_clock}
    return compute_metrics(
        generation.images, reference.images, bridge.stack.encoder,
        generated_grids=gen_grids, reference_grids=ref_grids, wall_clock=clock,
    )


# --- VARIANTS ---

def run_variant(
    variant: str, budget: Budget, seed: int, context: BenchContext
) -> Tuple[MetricReport, BridgeModel]:
    """Train and evaluate one variant on the validation captions."""
    bridge = train_bridge(context, variant, budget, seed)
    generation = generate_images(bridge, context.val.tokens, seed=seed)
    report = evaluate_generation(bridge, generation, context.val)
    logger.info(f"✅ {variant} seed={seed}: psnr={report.psnr:.3f} toy_frechet={report.toy_frechet:.4f}")
    return report, bridge


def compare_variants(
    variants: Sequence[str], budget: Budget, seeds: Sequence[int], context: BenchContext
) -> List[ReportRow]:
    """Table of variants at equal budget. Raises if any two variants saw different batches."""
    for v in variants:
        check_variant(v)
    rows = []
    chash = config_hash(budget.apply(context.config), exclude=("seed",))
    for seed in seeds:
        logs: Dict[str, str] = {}
        for variant in variants:
            report, bridge = run_variant(variant, budget, seed, context)
            logs[variant] = compute_hash(bridge.batch_hashes)
            rows.append(ReportRow.from_metrics(
                "variants", variant, seed, variant, bridge.token_count,
                context.config.sampler.decode_steps, report, chash, logs[variant],
            ))
        if len(set(logs.values())) > 1:
            raise RuntimeError(f"Variants consumed different batches at seed {seed}: {logs}")
    return rows


# --- SWEEPS ---

def sweep_token_count(
    counts: Sequence[int], budget: Budget, seeds: Sequence[int], context: BenchContext
) -> List[ReportRow]:
    """Reconstruction quality of the ControlNet bridge per token count, at equal budget."""
    grid_side = context.config.dims.grid_side
    for c in counts:
        check_token_count(c, grid_side)
    cn_only = Budget(0, budget.controlnet_steps, budget.batch_size)
    chash = config_hash(budget.apply(context.config), exclude=("seed", "token_count"))
    rows = []
    for seed in seeds:
        for count in counts:
            bridge = train_bridge(context, DEFAULT_VARIANT, cn_only, seed, token_count=count)
            generation = reconstruct_images(bridge, context.val.images, context.val.tokens, seed=seed)
            report = evaluate_generation(bridge, generation, context.val)
            rows.append(ReportRow.from_metrics(
                "token-count", str(count), seed, DEFAULT_VARIANT, count, context.config.sampler.decode_steps,
                report, chash, compute_hash(bridge.batch_hashes),
            ))
            logger.info(f"Token count {count} seed={seed}: psnr={report.psnr:.3f} mse={report.mse:.5f}")
    return rows


def sweep_decoding_steps(
    steps_list: Sequence[int], budget: Budget, seeds: Sequence[int], context: BenchContext
) -> List[ReportRow]:
    """One trained bridge per seed, decoded with each step count. Wall clock is the decode + diffusion time."""
    n = context.config.dims.num_tokens
    for s in steps_list:
        check_decode_steps(s, n)
    chash = config_hash(budget.apply(context.config), exclude=("seed", "sampler.decode_steps"))
    rows = []
    for seed in seeds:
        bridge = train_bridge(context, DEFAULT_VARIANT, budget, seed)
        bhash = compute_hash(bridge.batch_hashes)
        for steps in steps_list:
            generation = generate_images(bridge, context.val.tokens, decode_steps=steps, seed=seed)
            report = evaluate_generation(bridge, generation, context.val)
            elapsed = float(sum(generation.wall_clock.values()))
            rows.append(ReportRow.from_metrics(
                "decode-steps", str(steps), seed, DEFAULT_VARIANT, bridge.token_count, steps,
                report, chash, bhash, wall_clock_s=elapsed,
            ))
            logger.info(f"Decode steps {steps} seed={seed}: toy_frechet={report.toy_frechet:.4f} t={elapsed:.3f}s")
    return rows


# --- TRENDS ---

def _by_seed(rows: Sequence[ReportRow], sweep: str) -> Dict[int, Dict[str, ReportRow]]:
    table: Dict[int, Dict[str, ReportRow]] = {}
    for row in rows:
        if row.sweep == sweep:
            table.setdefault(row.seed, {})[row.key] = row
    return table


def _majority(flags: Sequence[bool]) -> bool:
    return bool(flags) and sum(flags) * 2 > len(flags)


def trend_summary(rows: Sequence[ReportRow]) -> Dict[str, Optional[bool]]:
    """
    Orderings the benchmark is expected to reproduce, each decided by a majority of seeds.
    A trend whose rows are absent is reported as None.

        variants_ordering      clip-latent beats every other variant on toy_frechet and psnr
        token_count_monotone   psnr non-decreasing in token count
        decode_steps_robust    toy_frechet(8) <= 1.15 x toy_frechet(64) and toy_frechet(1) > 1.5 x toy_frechet(64)
        decode_steps_faster    wall clock strictly decreasing with fewer steps
    """
    summary: Dict[str, Optional[bool]] = {}

    variants = _by_seed(rows, "variants")
    flags = []
    for cells in variants.values():
        ours = cells.get(DEFAULT_VARIANT)
        others = [r for k, r in cells.items() if k != DEFAULT_VARIANT]
        if ours is None or not others:
            continue
        flags.append(all(ours.toy_frechet < r.toy_frechet and ours.psnr > r.psnr for r in others))
    summary["variants_ordering"] = _majority(flags) if flags else None

    tokens = _by_seed(rows, "token-count")
    flags = []
    for cells in tokens.values():
        ordered = [cells[k].psnr for k in sorted(cells, key=int)]
        if len(ordered) >= 2:
            flags.append(all(b >= a for a, b in zip(ordered, ordered[1:])))
    summary["token_count_monotone"] = _majority(flags) if flags else None

    decode = _by_seed(rows, "decode-steps")
    robust, faster = [], []
    for cells in decode.values():
        if {"1", "8", "64"} <= set(cells):
            ref = cells["64"].toy_frechet
            robust.append(cells["8"].toy_frechet <= 1.15 * ref and cells["1"].toy_frechet > 1.5 * ref)
        times = [cells[k].wall_clock_s for k in sorted(cells, key=int)]
        if len(times) >= 2:
            faster.append(all(b > a for a, b in zip(times, times[1:])))
    summary["decode_steps_robust"] = _majority(robust) if robust else None
    summary["decode_steps_faster"] = _majority(faster) if faster else None
    return summary


def metric_means(rows: Sequence[ReportRow], metric: str) -> Dict[str, float]:
    """Mean of one metric per (sweep key) across seeds."""
    groups: Dict[str, List[float]] = {}
    for row in rows:
        groups.setdefault(row.key, []).append(float(getattr(row, metric)))
    return {k: float(np.mean(v)) for k, v in groups.items()}

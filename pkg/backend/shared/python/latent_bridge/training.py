"""
Training phases.

    1. pretrain_toy_backbone    encoder + base MLLM (captioning) + diffusion backbone, then freeze
    2. train_generation_branch  gen branch + vision head + mask token, masked-MSE on encoder grids
    3. train_latent_controlnet  ControlNet on ground-truth encoder grids, flow-matching loss

Phases 2 and 3 share no trainable tensors. Every batch, mask and noise draw is keyed by
(seed, step), so a run is reproducible from (config, dataset) and resumable from a checkpoint.
"""
import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .branched import BranchedTransformer, Modality, build_mllm, init_generation_branch
from .checkpoint import Checkpoint, make_checkpoint, restore_module
from .config import Phase, TrainConfig
from .controlnet import CrossAttentionAdapter, LatentControlNet
from .data import PAD_ID, SyntheticDataset, batch_indices
from .errors import DivergenceError, FrozenTensorError, OutOfRangeError
from .flow import DiffusionBackbone, build_backbone, flow_forward_process, flow_matching_loss, images_to_latents, sample_flow_inputs
from .latent import PatchDecoder, ToyEncoder, build_encoder, resize_grid_tokens
from .mar import MaskRatioSampler, masked_mse_loss, sample_training_planes
from .utils import STREAM_MASK, STREAM_NOISE, batch_hash, step_generator, step_rng, tensor_checksum

logger = logging.getLogger(__name__)

METRICS_HEADER = ("phase", "step", "loss", "batch_hash")


# --- MODEL STACK ---

@dataclass
class PretrainedStack:
    encoder: ToyEncoder
    mllm: BranchedTransformer
    backbone: DiffusionBackbone
    config: TrainConfig

    def modules(self) -> Dict[str, nn.Module]:
        return {"encoder": self.encoder, "mllm": self.mllm, "backbone": self.backbone}

    def freeze(self) -> None:
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.mllm.freeze_base()

    def frozen_checksum(self) -> str:
        """Checksum of every tensor no phase after pretraining may touch."""
        named = [(f"encoder/{n}", p) for n, p in self.encoder.state_dict().items()]
        named += [(f"backbone/{n}", p) for n, p in self.backbone.state_dict().items()]
        named += [(f"base/{n}", p) for n, p in self.mllm.base_parameters()]
        return tensor_checksum(named)

    def clone(self) -> "PretrainedStack":
        return copy.deepcopy(self)


def init_stack(config: TrainConfig) -> Tuple[PretrainedStack, PatchDecoder]:
    """Fresh, untrained models. Global torch RNG state is left untouched."""
    dims = config.dims
    with torch.random.fork_rng():
        encoder = build_encoder(dims, config.seed)
        mllm = build_mllm(dims, config.seed + 1)
        backbone = build_backbone(dims, config.seed + 2)
        torch.manual_seed(config.seed + 3)
        decoder = PatchDecoder(dims.patch_size, dims.embed_dim)
    return PretrainedStack(encoder, mllm, backbone, config), decoder


def finalize_stack(stack: PretrainedStack) -> PretrainedStack:
    """Copy base -> gen branch and freeze everything the later phases must not touch."""
    init_generation_branch(stack.mllm, seed=stack.config.seed)
    stack.freeze()
    return stack


def stack_from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> PretrainedStack:
    stack, _ = init_stack(config)
    restore_module(stack.encoder, ckpt, "encoder")
    restore_module(stack.mllm, ckpt, "mllm")
    restore_module(stack.backbone, ckpt, "backbone")
    stack.freeze()
    return stack


# --- OPTIMISATION PLUMBING ---

def build_optimizer(named_params: Iterable[Tuple[str, torch.Tensor]], lr: float) -> torch.optim.Adam:
    """Adam with a fixed learning rate. Refuses any tensor flagged frozen."""
    params = []
    for name, p in named_params:
        if not p.requires_grad:
            raise FrozenTensorError(f"Refusing to optimise frozen tensor '{name}'")
        params.append(p)
    if not params:
        raise FrozenTensorError("No trainable tensors were given to the optimizer")
    return torch.optim.Adam(params, lr=lr)


class MetricsLog:
    """Appends (phase, step, loss, batch_hash) rows to <dir>/<phase>_metrics.csv."""

    def __init__(self, directory: Optional[Union[str, Path]], phase: str):
        self.phase = phase
        self.path = None
        if directory is not None:
            self.path = Path(directory) / f"{phase}_metrics.csv"
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh).writerow(METRICS_HEADER)

    def append(self, step: int, loss: float, bhash: str) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([self.phase, step, repr(float(loss)), bhash])


@dataclass
class PhaseResult:
    checkpoint: Checkpoint
    history: List[float] = field(default_factory=list)
    batch_hashes: List[str] = field(default_factory=list)
    module: Optional[nn.Module] = None
    extras: Dict[str, List[float]] = field(default_factory=dict)


def _guard(loss: torch.Tensor, phase: str, step: int, history: Sequence[float]) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        last = history[-1] if history else float("nan")
        logger.error(f"{phase}: non-finite loss at step {step}")
        raise DivergenceError(phase, step, value, last)
    return value


def _batch(dataset: SyntheticDataset, config: TrainConfig, step: int):
    idx = batch_indices(config.seed, step, len(dataset), config.batch_size)
    return dataset.images[idx], dataset.tokens[idx], batch_hash(idx)


def _log_step(phase: str, step: int, value: float, bhash: str, every: int, log: MetricsLog) -> None:
    log.append(step, value, bhash)
    if every and step % every == 0:
        logger.info(f"[{phase}] step={step} loss={value:.6f} batch={bhash}")


# --- PHASE 1 ---

def pretrain_toy_backbone(
    config: TrainConfig,
    dataset: SyntheticDataset,
    steps: Optional[int] = None,
    log_dir: Optional[Union[str, Path]] = None,
) -> Tuple[PretrainedStack, PhaseResult]:
    """
    Jointly train the toy encoder (patch reconstruction), the base MLLM (captioning on
    [ImgU, Text]) and the diffusion backbone (flow matching); then initialise the generation
    branch from the trained base and freeze.
    """
    if len(dataset) == 0:
        raise ValueError("Pretraining needs a non-empty dataset")
    phase = Phase.PRETRAIN_BACKBONE.value
    steps = config.pretrain_steps if steps is None else steps
    stack, decoder = init_stack(config)
    patch = config.dims.patch_size

    named = [(f"encoder/{n}", p) for n, p in stack.encoder.named_parameters()]
    named += [(f"decoder/{n}", p) for n, p in decoder.named_parameters()]
    named += [(f"base/{n}", p) for n, p in stack.mllm.base_parameters()]
    named += [(f"backbone/{n}", p) for n, p in stack.backbone.named_parameters()]
    optimizer = build_optimizer(named, config.learning_rate)
    log = MetricsLog(log_dir, phase)
    history, hashes = [], []
    extras: Dict[str, List[float]] = {"recon": [], "caption": [], "flow": []}

    for step in range(steps):
        images, tokens, bhash = _batch(dataset, config, step)
        grids = stack.encoder(images)
        recon = F.mse_loss(decoder(grids), images)

        logits = stack.mllm.caption_logits(grids, tokens[:, :-1])
        caption = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1), ignore_index=PAD_ID)

        z0 = images_to_latents(images, patch)
        eps, t = sample_flow_inputs(z0, step_generator(config.seed, step, STREAM_NOISE))
        v = stack.backbone(flow_forward_process(z0, eps, t), t, tokens)
        flow = flow_matching_loss(v, z0, eps)

        loss = recon + caption + flow
        value = _guard(loss, phase, step, history)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        history.append(value)
        hashes.append(bhash)
        extras["recon"].append(float(recon.detach()))
        extras["caption"].append(float(caption.detach()))
        extras["flow"].append(float(flow.detach()))
        _log_step(phase, step, value, bhash, config.log_every, log)

    finalize_stack(stack)
    ckpt = make_checkpoint(stack.modules(), config.to_dict(), phase, step=steps)
    logger.info(f"🚀 Pretraining finished after {steps} steps")
    return stack, PhaseResult(ckpt, history, hashes, extras=extras)


# --- PHASE 2 ---

def _restore_optimizer(optimizer: torch.optim.Optimizer, resume: Optional[Checkpoint]) -> int:
    if resume is None:
        return 0
    if resume.optimizer is not None:
        optimizer.load_state_dict(resume.optimizer)
    return resume.step


def train_generation_branch(
    config: TrainConfig,
    dataset: SyntheticDataset,
    stack: PretrainedStack,
    steps: Optional[int] = None,
    resume: Optional[Checkpoint] = None,
    log_dir: Optional[Union[str, Path]] = None,
    bridge_encoder: Optional[nn.Module] = None,
) -> PhaseResult:
    """
    Masked-MSE training of the generation branch on [Text, ImgG] sequences.

    Only gen-branch tensors, the vision head and the mask token change. Frozen tensors are
    checksummed before and after; any change raises FrozenTensorError.

    Args:
        bridge_encoder: produces the target grids; defaults to the stack's own encoder
        resume: checkpoint of this phase to continue from (its step is the start step)
    """
    phase = Phase.TRAIN_BRANCH.value
    steps = config.branch_steps if steps is None else steps
    encoder = bridge_encoder if bridge_encoder is not None else stack.encoder
    mllm = stack.mllm
    d, h, w = mllm.grid_shape

    sampler = MaskRatioSampler.from_config(config.mask_ratio, config.seed)
    if resume is not None:
        restore_module(mllm, resume, "mllm")
        if "mask_ratio" in resume.rng_state:
            sampler.set_state(resume.rng_state["mask_ratio"])
    frozen_before = stack.frozen_checksum()

    optimizer = build_optimizer(mllm.generation_parameters(), config.learning_rate)
    start = _restore_optimizer(optimizer, resume)
    log = MetricsLog(log_dir, phase)
    history, hashes = [], []

    for step in range(start, steps):
        images, tokens, bhash = _batch(dataset, config, step)
        with torch.no_grad():
            target = encoder(images)
        planes = sample_training_planes(step_rng(config.seed, step, STREAM_MASK), sampler, images.shape[0], h, w)
        pred = mllm.predict_grid(tokens, target, planes)
        loss = masked_mse_loss(pred, target, planes)

        value = _guard(loss, phase, step, history)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(value)
        hashes.append(bhash)
        _log_step(phase, step, value, bhash, config.log_every, log)

    if stack.frozen_checksum() != frozen_before:
        raise FrozenTensorError(f"{phase}: frozen tensors changed")
    ckpt = make_checkpoint(
        stack.modules(), config.to_dict(), phase, step=max(steps, start),
        optimizer=optimizer, rng_state={"mask_ratio": sampler.get_state()},
    )
    logger.info(f"✅ Generation branch trained to step {ckpt.step}")
    return PhaseResult(ckpt, history, hashes, module=mllm)


@torch.no_grad()
def branch_validation_loss(
    stack: PretrainedStack,
    dataset: SyntheticDataset,
    seed: int = 0,
    bridge_encoder: Optional[nn.Module] = None,
    batch_size: int = 64,
) -> float:
    """Held-out masked MSE with masks fixed by `seed` (same masks for every model evaluated)."""
    encoder = bridge_encoder if bridge_encoder is not None else stack.encoder
    _, h, w = stack.mllm.grid_shape
    cfg = stack.config.mask_ratio
    sampler = MaskRatioSampler(cfg.mean, cfg.std, cfg.low, cfg.high, seed)
    rng = step_rng(seed, 0, STREAM_MASK)
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        tokens = dataset.tokens[start:start + batch_size]
        target = encoder(images)
        planes = sample_training_planes(rng, sampler, images.shape[0], h, w)
        loss = masked_mse_loss(stack.mllm.predict_grid(tokens, target, planes), target, planes)
        total += float(loss) * images.shape[0]
        count += images.shape[0]
    return total / count


# --- PHASE 3 ---

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def _train_flow_conditioner(
    phase: str,
    config: TrainConfig,
    dataset: SyntheticDataset,
    stack: PretrainedStack,
    named_params: List[Tuple[str, torch.Tensor]],
    modules: Dict[str, nn.Module],
    velocity: VelocityFn,
    steps: int,
    resume: Optional[Checkpoint],
    log_dir,
    encoder: Optional[nn.Module],
    token_count: int,
    data_steps: Optional[Sequence[int]] = None,
) -> PhaseResult:
    """
    Shared flow-matching loop for every module that conditions the frozen backbone on a bridge grid.
    `velocity(z_t, t, tokens, grids, images)` returns the guided velocity.
    `data_steps[i]` picks the batch and noise of loop step i (default: i itself).
    """
    if resume is not None:
        for ns, module in modules.items():
            restore_module(module, resume, ns)
    frozen_before = stack.frozen_checksum()
    optimizer = build_optimizer(named_params, config.learning_rate)
    start = _restore_optimizer(optimizer, resume)
    log = MetricsLog(log_dir, phase)
    history, hashes = [], []
    patch = config.dims.patch_size

    if data_steps is not None:
        steps = len(data_steps)
    for step in range(start, steps):
        data_step = step if data_steps is None else data_steps[step]
        images, tokens, bhash = _batch(dataset, config, data_step)
        z0 = images_to_latents(images, patch)
        grids = None
        if encoder is not None:
            with torch.no_grad():
                grids = resize_grid_tokens(encoder(images), token_count)
        eps, t = sample_flow_inputs(z0, step_generator(config.seed, data_step, STREAM_NOISE))
        z_t = flow_forward_process(z0, eps, t)
        loss = flow_matching_loss(velocity(z_t, t, tokens, grids, images), z0, eps)

        value = _guard(loss, phase, step, history)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(value)
        hashes.append(bhash)
        _log_step(phase, step, value, bhash, config.log_every, log)

    if stack.frozen_checksum() != frozen_before:
        raise FrozenTensorError(f"{phase}: frozen tensors changed")
    ckpt = make_checkpoint(
        {**stack.modules(), **modules}, config.to_dict(), phase, step=max(steps, start), optimizer=optimizer
    )
    return PhaseResult(ckpt, history, hashes)


def build_controlnet(stack: PretrainedStack) -> LatentControlNet:
    dims = stack.config.dims
    return LatentControlNet.from_backbone(
        stack.backbone, grid_width=dims.embed_dim, downsample_width=dims.downsample_width, seed=stack.config.seed
    )


def train_latent_controlnet(
    config: TrainConfig,
    dataset: SyntheticDataset,
    stack: PretrainedStack,
    steps: Optional[int] = None,
    resume: Optional[Checkpoint] = None,
    log_dir: Optional[Union[str, Path]] = None,
    bridge_encoder: Optional[nn.Module] = None,
    token_count: Optional[int] = None,
) -> PhaseResult:
    """
    Train a latent ControlNet against the frozen backbone, teacher-forced on ground-truth
    bridge grids (pooled to `token_count` cells).
    """
    phase = Phase.TRAIN_CONTROLNET.value
    steps = config.controlnet_steps if steps is None else steps
    count = token_count or config.bridge_tokens
    cn = build_controlnet(stack)
    backbone = stack.backbone

    def velocity(z_t, t, tokens, grids, images):
        return backbone(z_t, t, tokens, residuals=cn(z_t, t, tokens, grids, scale=1.0))

    result = _train_flow_conditioner(
        phase, config, dataset, stack, list(cn.named_parameters()), {"controlnet": cn}, velocity,
        steps, resume, log_dir, bridge_encoder if bridge_encoder is not None else stack.encoder, count,
    )
    result.module = cn
    logger.info(f"✅ Latent ControlNet trained to step {result.checkpoint.step} ({count} bridge tokens)")
    return result


def train_cross_adapter(
    config: TrainConfig,
    dataset: SyntheticDataset,
    stack: PretrainedStack,
    steps: Optional[int] = None,
    log_dir: Optional[Union[str, Path]] = None,
    token_count: Optional[int] = None,
) -> PhaseResult:
    """Cross-attention conditioning on the bridge grid in place of the ControlNet."""
    steps = config.controlnet_steps if steps is None else steps
    count = token_count or config.bridge_tokens
    adapter = CrossAttentionAdapter.for_backbone(stack.backbone, config.dims.embed_dim, seed=config.seed)
    backbone = stack.backbone

    def velocity(z_t, t, tokens, grids, images):
        return backbone(z_t, t, tokens, cross=adapter.bind(grids))

    result = _train_flow_conditioner(
        "train-cross-attn", config, dataset, stack, list(adapter.named_parameters()), {"adapter": adapter},
        velocity, steps, None, log_dir, stack.encoder, count,
    )
    result.module = adapter
    return result


# --- QUERY-TOKEN BRIDGE ---

class QueryTokens(nn.Module):
    """A learnable side x side grid of query embeddings fed to the MLLM as its ImgG segment."""

    def __init__(self, count: int, embed_dim: int, seed: int = 0):
        super().__init__()
        side = int(round(count ** 0.5))
        if side * side != count:
            raise OutOfRangeError(f"Query token count {count} is not a perfect square")
        generator = torch.Generator().manual_seed(seed)
        self.embedding = nn.Parameter(torch.randn(count, embed_dim, generator=generator) * 0.02)

    def forward(self, mllm: BranchedTransformer, text_tokens: torch.Tensor) -> torch.Tensor:
        """MLLM vision-head outputs at the query positions, reshaped to a (B, d, side, side) grid."""
        queries = self.embedding.unsqueeze(0).expand(text_tokens.shape[0], -1, -1)
        return mllm.predict_from_pieces([(Modality.TEXT, mllm.embed_text(text_tokens)), (Modality.IMG_G, queries)])


def train_query_token_bridge(
    config: TrainConfig,
    dataset: SyntheticDataset,
    stack: PretrainedStack,
    branch_steps: Optional[int] = None,
    controlnet_steps: Optional[int] = None,
    log_dir: Optional[Union[str, Path]] = None,
    token_count: Optional[int] = None,
) -> Tuple[QueryTokens, LatentControlNet, PhaseResult]:
    """
    Queries, generation branch and ControlNet trained jointly through the flow-matching loss,
    with no masked-autoregressive supervision.

    The run consumes the batches of a branch phase followed by those of a ControlNet phase, so
    its data order matches the two-phase bridges step for step.
    """
    branch_steps = config.branch_steps if branch_steps is None else branch_steps
    controlnet_steps = config.controlnet_steps if controlnet_steps is None else controlnet_steps
    data_steps = list(range(branch_steps)) + list(range(controlnet_steps))
    count = token_count or config.bridge_tokens
    queries = QueryTokens(count, config.dims.embed_dim, seed=config.seed)
    cn = build_controlnet(stack)
    backbone, mllm = stack.backbone, stack.mllm

    def velocity(z_t, t, tokens, grids, images):
        return backbone(z_t, t, tokens, residuals=cn(z_t, t, tokens, queries(mllm, tokens), scale=1.0))

    named = [(f"queries/{n}", p) for n, p in queries.named_parameters()]
    named += [(f"gen/{n}", p) for n, p in mllm.generation_parameters()]
    named += [(f"controlnet/{n}", p) for n, p in cn.named_parameters()]
    result = _train_flow_conditioner(
        "train-query-tokens", config, dataset, stack, named, {"queries": queries, "controlnet": cn},
        velocity, len(data_steps), None, log_dir, None, count, data_steps=data_steps,
    )
    return queries, cn, result

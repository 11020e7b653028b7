"""
Toy rectified-flow backbone.

Convention: z_t = (1 - t) * z0 + t * eps, velocity target eps - z0, t = 1 is pure noise.
The backbone is a small MMDiT: double-stream blocks (separate text / image weights, joint
attention) followed by single-stream blocks, adaLN-Zero modulation from time + pooled text.
It works on pixel-unshuffled images instead of VAE latents.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .branched import RMSNorm
from .errors import DimensionMismatchError, OutOfRangeError

logger = logging.getLogger(__name__)

PAD_ID = 0

Time = Union[float, torch.Tensor]


# --- FLOW MATH ---

def _time_tensor(t: Time, batch: int, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.dim() == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise DimensionMismatchError(f"Flow time has shape {tuple(t.shape)}, expected ({batch},)")
    if bool(((t < 0) | (t > 1)).any()):
        raise OutOfRangeError(f"Flow time must lie in [0, 1], got {t.min().item()}..{t.max().item()}")
    return t


def flow_forward_process(z0: torch.Tensor, eps: torch.Tensor, t: Time) -> torch.Tensor:
    """z_t = (1 - t) * z0 + t * eps. `t` is a scalar or one value per batch element."""
    if z0.shape != eps.shape:
        raise DimensionMismatchError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    if z0.dim() == 0:
        t = torch.as_tensor(t, dtype=z0.dtype)
        if not 0.0 <= float(t) <= 1.0:
            raise OutOfRangeError(f"Flow time must lie in [0, 1], got {float(t)}")
        return (1 - t) * z0 + t * eps
    tb = _time_tensor(t, z0.shape[0], z0).view(-1, *([1] * (z0.dim() - 1)))
    return (1 - tb) * z0 + tb * eps


def flow_matching_loss(v_pred: torch.Tensor, z0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if not v_pred.shape == z0.shape == eps.shape:
        raise DimensionMismatchError(
            f"Velocity {tuple(v_pred.shape)}, z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} must match"
        )
    return (v_pred - (eps - z0)).pow(2).mean()


def images_to_latents(images: torch.Tensor, patch_size: int = 4) -> torch.Tensor:
    """(B, 3, H, W) in [0, 1] -> (B, 3*P*P, H/P, W/P) in [-1, 1]."""
    return F.pixel_unshuffle(images * 2 - 1, patch_size)


def latents_to_images(latents: torch.Tensor, patch_size: int = 4) -> torch.Tensor:
    return ((F.pixel_shuffle(latents, patch_size) + 1) / 2).clamp(0.0, 1.0)


# --- BUILDING BLOCKS ---

class TimestepEmbedder(nn.Module):
    """Sinusoidal features of t followed by a two-layer MLP."""

    def __init__(self, hidden_size: int, freq_dim: int = 64):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden_size), nn.SiLU(), nn.Linear(hidden_size, hidden_size))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
        args = (t * 1000.0)[:, None] * freqs[None, :]
        return self.mlp(torch.cat([args.cos(), args.sin()], dim=-1))


class AdaLayerNormZero(nn.Module):
    """Emits (normed x, gate_msa, shift_mlp, scale_mlp, gate_mlp) from a conditioning vector."""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.linear = nn.Linear(hidden_size, 6 * hidden_size)
        self.norm = RMSNorm(hidden_size)

    def forward(self, x: torch.Tensor, emb: torch.Tensor):
        shift, scale, gate, shift_mlp, scale_mlp, gate_mlp = self.linear(F.silu(emb)).chunk(6, dim=-1)
        x = self.norm(x) * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)
        return x, gate, shift_mlp, scale_mlp, gate_mlp


class AdaLayerNormZeroSingle(nn.Module):
    def __init__(self, hidden_size: int):
        super().__init__()
        self.linear = nn.Linear(hidden_size, 3 * hidden_size)
        self.norm = RMSNorm(hidden_size)

    def forward(self, x: torch.Tensor, emb: torch.Tensor):
        shift, scale, gate = self.linear(F.silu(emb)).chunk(3, dim=-1)
        return self.norm(x) * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1), gate


def _attend(q, k, v, key_mask: Optional[torch.Tensor]) -> torch.Tensor:
    scores = (q @ k.transpose(-2, -1)) * q.shape[-1] ** -0.5
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    return scores.softmax(dim=-1) @ v


class FeedForward(nn.Module):
    def __init__(self, hidden_size: int, mlp_ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(hidden_size, mlp_ratio * hidden_size)
        self.fc2 = nn.Linear(mlp_ratio * hidden_size, hidden_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class DoubleStreamBlock(nn.Module):
    """Separate text / image weights, one joint attention over [text, image]."""

    def __init__(self, hidden_size: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.num_heads = num_heads
        self.img_norm1 = AdaLayerNormZero(hidden_size)
        self.txt_norm1 = AdaLayerNormZero(hidden_size)
        self.img_qkv = nn.Linear(hidden_size, 3 * hidden_size, bias=False)
        self.txt_qkv = nn.Linear(hidden_size, 3 * hidden_size, bias=False)
        self.img_out = nn.Linear(hidden_size, hidden_size, bias=False)
        self.txt_out = nn.Linear(hidden_size, hidden_size, bias=False)
        self.img_norm2 = RMSNorm(hidden_size)
        self.txt_norm2 = RMSNorm(hidden_size)
        self.img_mlp = FeedForward(hidden_size, mlp_ratio)
        self.txt_mlp = FeedForward(hidden_size, mlp_ratio)

    def _heads(self, qkv: torch.Tensor):
        B, N, three_d = qkv.shape
        return qkv.view(B, N, 3, self.num_heads, three_d // (3 * self.num_heads)).permute(2, 0, 3, 1, 4)

    def forward(self, txt, img, vec, key_mask=None):
        img_n, img_gate, img_shift_mlp, img_scale_mlp, img_gate_mlp = self.img_norm1(img, vec)
        txt_n, txt_gate, txt_shift_mlp, txt_scale_mlp, txt_gate_mlp = self.txt_norm1(txt, vec)
        tq, tk, tv = self._heads(self.txt_qkv(txt_n))
        iq, ik, iv = self._heads(self.img_qkv(img_n))
        q, k, v = torch.cat([tq, iq], 2), torch.cat([tk, ik], 2), torch.cat([tv, iv], 2)
        out = _attend(q, k, v, key_mask).transpose(1, 2).flatten(2)
        L = txt.shape[1]
        txt = txt + txt_gate.unsqueeze(1) * self.txt_out(out[:, :L])
        img = img + img_gate.unsqueeze(1) * self.img_out(out[:, L:])
        txt_in = self.txt_norm2(txt) * (1 + txt_scale_mlp.unsqueeze(1)) + txt_shift_mlp.unsqueeze(1)
        img_in = self.img_norm2(img) * (1 + img_scale_mlp.unsqueeze(1)) + img_shift_mlp.unsqueeze(1)
        txt = txt + txt_gate_mlp.unsqueeze(1) * self.txt_mlp(txt_in)
        img = img + img_gate_mlp.unsqueeze(1) * self.img_mlp(img_in)
        return txt, img


class SingleStreamBlock(nn.Module):
    """Shared weights over the concatenated [text, image] sequence."""

    def __init__(self, hidden_size: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.num_heads = num_heads
        self.norm = AdaLayerNormZeroSingle(hidden_size)
        self.qkv = nn.Linear(hidden_size, 3 * hidden_size, bias=False)
        self.out = nn.Linear(hidden_size, hidden_size, bias=False)
        self.norm2 = RMSNorm(hidden_size)
        self.mlp = FeedForward(hidden_size, mlp_ratio)

    def forward(self, txt, img, vec, key_mask=None):
        L = txt.shape[1]
        x = torch.cat([txt, img], dim=1)
        x_n, gate = self.norm(x, vec)
        B, N, D = x.shape
        q, k, v = self.qkv(x_n).view(B, N, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        x = x + gate.unsqueeze(1) * self.out(_attend(q, k, v, key_mask).transpose(1, 2).flatten(2))
        x = x + self.mlp(self.norm2(x))
        return x[:, :L], x[:, L:]


# --- BACKBONE ---

@dataclass
class BlockResiduals:
    """Per-block additive residuals for the image stream: one per controlled double / single block."""

    double: Tuple[torch.Tensor, ...] = field(default_factory=tuple)
    single: Tuple[torch.Tensor, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.double) + len(self.single)

    def flat(self) -> Tuple[torch.Tensor, ...]:
        return tuple(self.double) + tuple(self.single)


# (double block index, image hidden) -> additive image delta
CrossHook = Callable[[int, torch.Tensor], torch.Tensor]


@dataclass
class Conditioning:
    txt: torch.Tensor
    img: torch.Tensor
    vec: torch.Tensor
    key_mask: torch.Tensor


class DiffusionBackbone(nn.Module):
    """
    Velocity model v(z_t, t, text). Frozen after pretraining; ControlNet residuals and
    cross-attention deltas enter through the optional `residuals` / `cross` arguments.
    """

    def __init__(
        self,
        latent_channels: int = 48,
        hidden_size: int = 32,
        num_heads: int = 2,
        double_blocks: int = 6,
        single_blocks: int = 2,
        vocab_size: int = 64,
        max_text_len: int = 16,
        grid_side: int = 8,
        controlled_double: int = 4,
        controlled_single: int = 1,
        mlp_ratio: int = 4,
    ):
        super().__init__()
        if hidden_size % num_heads:
            raise DimensionMismatchError(f"Width {hidden_size} not divisible by {num_heads} heads")
        self.latent_channels = latent_channels
        self.hidden_size = hidden_size
        self.grid_side = grid_side
        self.controlled_double = controlled_double
        self.controlled_single = controlled_single

        self.img_in = nn.Linear(latent_channels, hidden_size)
        self.img_pos = nn.Parameter(torch.randn(grid_side * grid_side, hidden_size) * 0.02)
        self.txt_embed = nn.Embedding(vocab_size, hidden_size)
        self.txt_pos = nn.Embedding(max_text_len, hidden_size)
        self.time_in = TimestepEmbedder(hidden_size)
        self.vector_in = nn.Linear(hidden_size, hidden_size)

        self.double_blocks = nn.ModuleList(
            [DoubleStreamBlock(hidden_size, num_heads, mlp_ratio) for _ in range(double_blocks)]
        )
        self.single_blocks = nn.ModuleList(
            [SingleStreamBlock(hidden_size, num_heads, mlp_ratio) for _ in range(single_blocks)]
        )
        self.final_norm = RMSNorm(hidden_size)
        self.proj_out = nn.Linear(hidden_size, latent_channels)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    # --- CONDITIONING ---

    def embed_text(self, text_tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (text hidden, pooled text, valid-token mask)."""
        positions = torch.arange(text_tokens.shape[1], device=text_tokens.device)
        txt = self.txt_embed(text_tokens) + self.txt_pos(positions)
        valid = text_tokens != PAD_ID
        weights = valid.to(txt.dtype).unsqueeze(-1)
        pooled = (txt * weights).sum(1) / weights.sum(1).clamp_min(1.0)
        return txt, pooled, valid

    def embed_latents(self, z_t: torch.Tensor) -> torch.Tensor:
        if z_t.dim() != 4 or z_t.shape[1] != self.latent_channels or z_t.shape[-2:] != (self.grid_side, self.grid_side):
            raise DimensionMismatchError(
                f"Latent {tuple(z_t.shape)} does not match ({self.latent_channels}, {self.grid_side}, {self.grid_side})"
            )
        return self.img_in(z_t.flatten(2).transpose(1, 2)) + self.img_pos

    def condition(self, z_t: torch.Tensor, t: Time, text_tokens: torch.Tensor) -> Conditioning:
        txt, pooled, valid = self.embed_text(text_tokens)
        img = self.embed_latents(z_t)
        t = _time_tensor(t, z_t.shape[0], z_t)
        vec = self.time_in(t) + self.vector_in(F.silu(pooled))
        image_valid = torch.ones(img.shape[:2], dtype=torch.bool, device=img.device)
        return Conditioning(txt, img, vec, torch.cat([valid, image_valid], dim=1))

    def check_residuals(self, residuals: Optional[BlockResiduals]) -> None:
        if residuals is None:
            return
        if len(residuals.double) != self.controlled_double or len(residuals.single) != self.controlled_single:
            raise DimensionMismatchError(
                f"Got {len(residuals.double)}+{len(residuals.single)} residuals, "
                f"backbone controls {self.controlled_double}+{self.controlled_single} blocks"
            )

    def forward(
        self,
        z_t: torch.Tensor,
        t: Time,
        text_tokens: torch.Tensor,
        residuals: Optional[BlockResiduals] = None,
        cross: Optional[CrossHook] = None,
    ) -> torch.Tensor:
        """
        Args:
            z_t: (B, C, H', W') noisy latent
            t: flow time, scalar or (B,)
            text_tokens: (B, L) token ids
            residuals: added to the image stream after each controlled block
            cross: called after every double block; its output is added to the image stream

        Returns:
            (B, C, H', W') predicted velocity
        """
        self.check_residuals(residuals)
        cond = self.condition(z_t, t, text_tokens)
        txt, img = cond.txt, cond.img
        for i, block in enumerate(self.double_blocks):
            txt, img = block(txt, img, cond.vec, cond.key_mask)
            if cross is not None:
                img = img + cross(i, img)
            if residuals is not None and i < len(residuals.double):
                img = img + residuals.double[i]
        for i, block in enumerate(self.single_blocks):
            txt, img = block(txt, img, cond.vec, cond.key_mask)
            if residuals is not None and i < len(residuals.single):
                img = img + residuals.single[i]
        out = self.proj_out(self.final_norm(img))
        return out.transpose(1, 2).reshape(z_t.shape)


def build_backbone(dims, seed: Optional[int] = None) -> DiffusionBackbone:
    if seed is not None:
        torch.manual_seed(seed)
    return DiffusionBackbone(
        latent_channels=dims.latent_channels,
        hidden_size=dims.dm_width,
        num_heads=dims.dm_heads,
        double_blocks=dims.dm_double_blocks,
        single_blocks=dims.dm_single_blocks,
        vocab_size=dims.vocab_size,
        max_text_len=dims.max_text_len,
        grid_side=dims.grid_side,
        controlled_double=dims.cn_double_blocks,
        controlled_single=dims.cn_single_blocks,
        mlp_ratio=dims.mlp_ratio,
    )


def sample_flow_inputs(z0: torch.Tensor, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw (eps, t) for one flow-matching step. t ~ U[0, 1] per sample."""
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    t = torch.rand(z0.shape[0], generator=generator, dtype=z0.dtype)
    return eps, t

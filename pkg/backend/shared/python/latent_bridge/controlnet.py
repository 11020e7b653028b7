"""
Latent ControlNet and the cross-attention adapter.

The ControlNet is a trainable copy of the backbone's embeddings and first blocks. Instead of a
control image it consumes a patch grid: strided-conv downsample, nearest upsample to the
backbone's latent grid, linear projection into the image stream. Each copied block emits a
residual through a zero-initialised projection.
"""
import copy
import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionMismatchError, OutOfRangeError
from .flow import BlockResiduals, CrossHook, DiffusionBackbone, Time
from .latent import GridDownsample, downsample_grid, flatten_grid

logger = logging.getLogger(__name__)


def _zero_linear(in_features: int, out_features: int, bias: bool = True) -> nn.Linear:
    layer = nn.Linear(in_features, out_features, bias=bias)
    nn.init.zeros_(layer.weight)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


@dataclass
class ControlState:
    z_t: torch.Tensor
    t: Time
    c_text: torch.Tensor
    c_grid: torch.Tensor
    scale: float = 1.0

    def __post_init__(self):
        if self.scale < 0:
            raise OutOfRangeError(f"Conditioning scale must be >= 0, got {self.scale}")
        t = torch.as_tensor(self.t)
        if bool(((t < 0) | (t > 1)).any()):
            raise OutOfRangeError("Flow time must lie in [0, 1]")


class LatentControlNet(nn.Module):
    def __init__(self, trunk: DiffusionBackbone, grid_width: int, downsample_width: int):
        super().__init__()
        self.trunk = trunk
        self.grid_width = grid_width
        self.downsample = GridDownsample(grid_width, downsample_width)
        self.control_in = nn.Linear(downsample_width, trunk.hidden_size)
        hidden = trunk.hidden_size
        self.double_out = nn.ModuleList([_zero_linear(hidden, hidden) for _ in trunk.double_blocks])
        self.single_out = nn.ModuleList([_zero_linear(hidden, hidden) for _ in trunk.single_blocks])

    @classmethod
    def from_backbone(
        cls,
        backbone: DiffusionBackbone,
        grid_width: int = 16,
        downsample_width: int = 16,
        seed: int = 0,
    ) -> "LatentControlNet":
        """Copy embeddings and the first controlled_double / controlled_single blocks of the backbone."""
        trunk = copy.deepcopy(backbone)
        trunk.double_blocks = nn.ModuleList(list(trunk.double_blocks)[: backbone.controlled_double])
        trunk.single_blocks = nn.ModuleList(list(trunk.single_blocks)[: backbone.controlled_single])
        del trunk.final_norm
        del trunk.proj_out
        for p in trunk.parameters():
            p.requires_grad_(True)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            cn = cls(trunk, grid_width, downsample_width)
        logger.info(
            f"Built latent ControlNet: {len(trunk.double_blocks)} double + {len(trunk.single_blocks)} single blocks"
        )
        return cn

    def control_tokens(self, c_grid: torch.Tensor) -> torch.Tensor:
        """
        Downsample, upsample back to the latent token grid and project to the trunk width.

        control_in keeps its random init: the zero-initialised outputs alone keep a fresh ControlNet
        silent, and the grid signal must already reach them for their first gradient to depend on it.
        """
        if c_grid.dim() != 4 or c_grid.shape[1] != self.grid_width:
            raise DimensionMismatchError(f"Control grid {tuple(c_grid.shape)} must be (B, {self.grid_width}, H', W')")
        down = downsample_grid(c_grid, self.downsample)
        side = self.trunk.grid_side
        up = F.interpolate(down, size=(side, side), mode="nearest")
        return self.control_in(flatten_grid(up))

    def forward(
        self, z_t: torch.Tensor, t: Time, text_tokens: torch.Tensor, c_grid: torch.Tensor, scale: float = 1.0
    ) -> BlockResiduals:
        cond = self.trunk.condition(z_t, t, text_tokens)
        txt, img = cond.txt, cond.img + self.control_tokens(c_grid)
        double, single = [], []
        for block, out in zip(self.trunk.double_blocks, self.double_out):
            txt, img = block(txt, img, cond.vec, cond.key_mask)
            double.append(out(img) * scale)
        for block, out in zip(self.trunk.single_blocks, self.single_out):
            txt, img = block(txt, img, cond.vec, cond.key_mask)
            single.append(out(img) * scale)
        return BlockResiduals(tuple(double), tuple(single))


def controlnet_forward(cn: LatentControlNet, state: ControlState) -> BlockResiduals:
    return cn(state.z_t, state.t, state.c_text, state.c_grid, state.scale)


class CrossAttentionAdapter(nn.Module):
    """
    Trainable cross-attention from backbone image tokens to bridge grid tokens, one per double block.
    All projections are bias-free; the output projections start at zero.
    """

    def __init__(self, grid_width: int, hidden_size: int, num_blocks: int, num_heads: int = 2):
        super().__init__()
        if hidden_size % num_heads:
            raise DimensionMismatchError(f"Width {hidden_size} not divisible by {num_heads} heads")
        self.grid_width = grid_width
        self.num_heads = num_heads
        self.ctx_in = nn.Linear(grid_width, hidden_size, bias=False)
        self.q = nn.ModuleList([nn.Linear(hidden_size, hidden_size, bias=False) for _ in range(num_blocks)])
        self.k = nn.ModuleList([nn.Linear(hidden_size, hidden_size, bias=False) for _ in range(num_blocks)])
        self.v = nn.ModuleList([nn.Linear(hidden_size, hidden_size, bias=False) for _ in range(num_blocks)])
        self.out = nn.ModuleList([_zero_linear(hidden_size, hidden_size, bias=False) for _ in range(num_blocks)])

    @classmethod
    def for_backbone(cls, backbone: DiffusionBackbone, grid_width: int, seed: int = 0) -> "CrossAttentionAdapter":
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return cls(grid_width, backbone.hidden_size, len(backbone.double_blocks), num_heads=2)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        return x.view(B, N, self.num_heads, D // self.num_heads).transpose(1, 2)

    def bind(self, grid: torch.Tensor, scale: float = 1.0) -> CrossHook:
        if grid.dim() != 4 or grid.shape[1] != self.grid_width:
            raise DimensionMismatchError(f"Context grid {tuple(grid.shape)} must be (B, {self.grid_width}, H', W')")
        ctx = self.ctx_in(flatten_grid(grid))

        def hook(index: int, img: torch.Tensor) -> torch.Tensor:
            if index >= len(self.q):
                return torch.zeros_like(img)
            q, k, v = self._split(self.q[index](img)), self._split(self.k[index](ctx)), self._split(self.v[index](ctx))
            probs = ((q @ k.transpose(-2, -1)) * q.shape[-1] ** -0.5).softmax(dim=-1)
            return self.out[index]((probs @ v).transpose(1, 2).flatten(2)) * scale

        return hook


def residuals_are_zero(residuals: Optional[BlockResiduals]) -> bool:
    return residuals is None or all(bool((r == 0).all()) for r in residuals.flat())

"""
Latent core: images, the toy visual encoder, patch grids and mask-token substitution.

Conventions:
    image:  (3, H, W) or (B, 3, H, W), values in [0, 1]
    grid:   (d, H', W') or (B, d, H', W'), H' = H / P
    tokens: (H'*W', d) or (B, H'*W', d), raster (row-major) order
"""
import logging
from typing import Iterable, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionMismatchError, OutOfRangeError

logger = logging.getLogger(__name__)


def validate_image(images: torch.Tensor, patch_size: int) -> None:
    if images.dim() not in (3, 4) or images.shape[-3] != 3:
        raise DimensionMismatchError(f"Expected image of shape (3, H, W) or (B, 3, H, W), got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h <= 0 or w <= 0 or h % patch_size or w % patch_size:
        raise DimensionMismatchError(f"Image {h}x{w} is not divisible by patch size {patch_size}")
    if not torch.isfinite(images).all():
        raise DimensionMismatchError("Image contains non-finite values")


class LocalMixing(nn.Module):
    """Depthwise 3x3 + pointwise mixing with a residual connection. Bias-free, so mixing(0) == 0."""

    def __init__(self, dim: int):
        super().__init__()
        self.depthwise = nn.Conv2d(dim, dim, kernel_size=3, padding=1, groups=dim, bias=False)
        self.pointwise = nn.Conv2d(dim, dim, kernel_size=1, bias=False)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.pointwise(self.act(self.depthwise(x)))


class ToyEncoder(nn.Module):
    """
    Patch projection (3*P*P -> d), a small stack of local mixing layers and a learned
    positional table of size H' x W'. Plays the MLLM's native visual encoder.
    """

    def __init__(self, patch_size: int = 4, embed_dim: int = 16, grid_side: int = 8, mixing_layers: int = 2):
        super().__init__()
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.grid_side = grid_side
        self.patch_proj = nn.Linear(3 * patch_size * patch_size, embed_dim)
        self.mixing = nn.ModuleList([LocalMixing(embed_dim) for _ in range(mixing_layers)])
        self.pos_table = nn.Parameter(torch.randn(embed_dim, grid_side, grid_side) * 0.02)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        patches = F.pixel_unshuffle(images, self.patch_size)  # (B, 3*P*P, H', W')
        if patches.shape[-2:] != (self.grid_side, self.grid_side):
            raise DimensionMismatchError(
                f"Encoder expects a {self.grid_side}x{self.grid_side} grid, image gives {tuple(patches.shape[-2:])}"
            )
        x = self.patch_proj(patches.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        for layer in self.mixing:
            x = layer(x)
        x = x + self.pos_table
        return x.squeeze(0) if squeeze else x


class PatchDecoder(nn.Module):
    """Linear read-out d -> 3*P*P used only to pretrain the encoder by patch reconstruction."""

    def __init__(self, patch_size: int = 4, embed_dim: int = 16):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(embed_dim, 3 * patch_size * patch_size)

    def forward(self, grids: torch.Tensor) -> torch.Tensor:
        patches = self.proj(grids.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return F.pixel_shuffle(patches, self.patch_size)


class RawPixelEncoder(nn.Module):
    """
    Stand-in for a non-MLLM-aligned VAE bridge: average-pool the image to the grid and
    project the 3 colour channels to d with a fixed (seeded, frozen) linear map.
    """

    def __init__(self, patch_size: int = 4, embed_dim: int = 16, seed: int = 0):
        super().__init__()
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        generator = torch.Generator().manual_seed(seed)
        self.register_buffer("proj", torch.randn(embed_dim, 3, generator=generator) / 3 ** 0.5)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        pooled = F.avg_pool2d(images * 2 - 1, self.patch_size)
        x = torch.einsum("dc,bchw->bdhw", self.proj.to(pooled.dtype), pooled)
        return x.squeeze(0) if squeeze else x


def encode_image(image: torch.Tensor, enc: nn.Module) -> torch.Tensor:
    """z = E(x). Raises DimensionMismatchError when H or W is not divisible by P."""
    validate_image(image, enc.patch_size)
    return enc(image)


# --- GRID PLUMBING ---

def flatten_grid(grid: torch.Tensor) -> torch.Tensor:
    """(…, d, H', W') -> (…, H'*W', d) in raster order."""
    if grid.dim() < 3:
        raise DimensionMismatchError(f"Grid must have at least 3 dims, got {tuple(grid.shape)}")
    return grid.flatten(-2).transpose(-1, -2)


def reshape_to_grid(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """(…, H'*W', d) -> (…, d, H', W'). Inverse of flatten_grid."""
    if tokens.dim() < 2 or tokens.shape[-2] != height * width:
        raise DimensionMismatchError(
            f"Token count {tokens.shape[-2] if tokens.dim() >= 2 else None} does not match {height}x{width}"
        )
    return tokens.transpose(-1, -2).reshape(*tokens.shape[:-2], tokens.shape[-1], height, width)


class GridDownsample(nn.Module):
    """Strided 2x2 convolution, stride 2, no padding: d x H' x W' -> d'' x H'/2 x W'/2."""

    def __init__(self, in_width: int, out_width: int):
        super().__init__()
        self.conv = nn.Conv2d(in_width, out_width, kernel_size=2, stride=2, padding=0)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return downsample_grid(grid, self)


def downsample_grid(grid: torch.Tensor, conv: GridDownsample) -> torch.Tensor:
    h, w = grid.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionMismatchError(f"Cannot downsample a {h}x{w} grid by 2 (odd dimension)")
    squeeze = grid.dim() == 3
    x = conv.conv(grid.unsqueeze(0) if squeeze else grid)
    return x.squeeze(0) if squeeze else x


def resize_grid_tokens(grid: torch.Tensor, token_count: int) -> torch.Tensor:
    """Average-pool a square grid down to `token_count` cells (a perfect square whose side divides H')."""
    side = int(round(token_count ** 0.5))
    h, w = grid.shape[-2:]
    if side * side != token_count or side <= 0:
        raise OutOfRangeError(f"Token count {token_count} is not a perfect square")
    if h != w or h % side:
        raise OutOfRangeError(f"Token count {token_count} does not fit a {h}x{w} grid")
    if side == h:
        return grid
    squeeze = grid.dim() == 3
    x = F.avg_pool2d(grid.unsqueeze(0) if squeeze else grid, h // side)
    return x.squeeze(0) if squeeze else x


# --- MASK TOKENS ---

class MaskToken(nn.Module):
    """Single shared learnable <M> embedding. Zero-initialised."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.embedding = nn.Parameter(torch.zeros(embed_dim))


def indices_to_plane(indices: Iterable[int], height: int, width: int) -> torch.Tensor:
    idx = [int(i) for i in indices]
    if len(set(idx)) != len(idx):
        raise OutOfRangeError("Mask indices must be unique")
    n = height * width
    for i in idx:
        if i < 0 or i >= n:
            raise OutOfRangeError(f"Mask index {i} out of range for {n} cells")
    plane = torch.zeros(n, dtype=torch.bool)
    if idx:
        plane[torch.tensor(idx, dtype=torch.long)] = True
    return plane.view(height, width)


def apply_mask_plane(grids: torch.Tensor, plane: torch.Tensor, token: torch.Tensor) -> torch.Tensor:
    """Replace cells where `plane` is true with the mask token embedding."""
    if plane.shape != grids.shape[:-3] + grids.shape[-2:]:
        raise DimensionMismatchError(f"Mask plane {tuple(plane.shape)} does not match grid {tuple(grids.shape)}")
    fill = token.to(grids.dtype).view(-1, 1, 1)
    return torch.where(plane.unsqueeze(-3), fill, grids)


def substitute_masks(
    grid: torch.Tensor, mask_set: Sequence[int], m: MaskToken
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Put the mask token into the cells listed in `mask_set` (raster indices).

    Returns:
        (masked grid, boolean mask plane of shape H' x W')
    """
    h, w = grid.shape[-2:]
    plane = indices_to_plane(mask_set, h, w)
    if grid.dim() == 4:
        plane_b = plane.expand(grid.shape[0], h, w)
        return apply_mask_plane(grid, plane_b, m.embedding), plane
    return apply_mask_plane(grid, plane, m.embedding), plane


def build_encoder(dims, seed: Optional[int] = None) -> ToyEncoder:
    if seed is not None:
        torch.manual_seed(seed)
    return ToyEncoder(dims.patch_size, dims.embed_dim, dims.grid_side, dims.encoder_mixing_layers)

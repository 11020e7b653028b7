"""
Dual-branch toy MLLM.

Text and image-understanding (ImgU) tokens run through frozen base weights; image-generation
(ImgG) tokens run through a trainable copy of the QKV / output / MLP / norm weights. All tokens
meet in one joint attention per layer, gated by a modality-aware mask.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import DimensionMismatchError
from .latent import MaskToken, apply_mask_plane, flatten_grid, reshape_to_grid

logger = logging.getLogger(__name__)


class Modality(str, Enum):
    TEXT = "text"
    IMG_U = "img_u"
    IMG_G = "img_g"


@dataclass(frozen=True)
class Segment:
    modality: Modality
    start: int
    length: int


def segments_from_lengths(pieces: Sequence[Tuple[Modality, int]]) -> List[Segment]:
    segments, start = [], 0
    for modality, length in pieces:
        segments.append(Segment(Modality(modality), start, int(length)))
        start += int(length)
    return segments


def validate_segments(segments: Sequence[Segment]) -> int:
    """Check the segments tile [0, N) in order. Returns N."""
    if not segments:
        raise DimensionMismatchError("Segment list is empty")
    expected = 0
    for seg in segments:
        if seg.length <= 0:
            raise DimensionMismatchError(f"Segment {seg} has no tokens")
        if seg.start != expected:
            raise DimensionMismatchError(f"Segment {seg} does not start at position {expected}")
        expected += seg.length
    return expected


def modality_positions(segments: Sequence[Segment], modality: Modality) -> torch.Tensor:
    n = validate_segments(segments)
    sel = torch.zeros(n, dtype=torch.bool)
    for seg in segments:
        if seg.modality == modality:
            sel[seg.start:seg.start + seg.length] = True
    return sel


def build_attention_mask(segments: Sequence[Segment]) -> torch.Tensor:
    """
    Boolean N x N mask, entry (q, k) true iff query q may attend key k.

    Text queries: causal over non-ImgG keys.
    ImgU queries: non-ImgG keys of earlier segments, bidirectional inside their own segment.
    ImgG queries: every key.
    No Text or ImgU query ever sees an ImgG key.
    """
    n = validate_segments(segments)
    modality = torch.empty(n, dtype=torch.long)
    seg_index = torch.empty(n, dtype=torch.long)
    codes = {Modality.TEXT: 0, Modality.IMG_U: 1, Modality.IMG_G: 2}
    for i, seg in enumerate(segments):
        modality[seg.start:seg.start + seg.length] = codes[seg.modality]
        seg_index[seg.start:seg.start + seg.length] = i
    pos = torch.arange(n)

    mod_q, mod_k = modality[:, None], modality[None, :]
    key_visible = mod_k != 2
    text_rows = (mod_q == 0) & key_visible & (pos[None, :] <= pos[:, None])
    und_rows = (mod_q == 1) & key_visible & (seg_index[None, :] <= seg_index[:, None])
    gen_rows = (mod_q == 2).expand(n, n)
    return text_rows | und_rows | gen_rows


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class BlockParams(nn.Module):
    """One branch's weights for a pre-norm transformer block."""

    def __init__(self, dim: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = RMSNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))


def _route(x: torch.Tensor, gen_sel: torch.Tensor, base_fn, gen_fn) -> torch.Tensor:
    # Row-wise ops: every row's result depends only on that row, so selecting per row is exact.
    if not bool(gen_sel.any()):
        return base_fn(x)
    if bool(gen_sel.all()):
        return gen_fn(x)
    return torch.where(gen_sel.view(1, -1, 1), gen_fn(x), base_fn(x))


class BranchedBlock(nn.Module):
    """Frozen base block plus a trainable generation copy, sharing one joint attention."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        if dim % num_heads:
            raise DimensionMismatchError(f"Width {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.base = BlockParams(dim, mlp_ratio)
        self.gen = BlockParams(dim, mlp_ratio)

    def forward(
        self,
        x: torch.Tensor,
        segments: Sequence[Segment],
        mask: torch.Tensor,
        return_attention: bool = False,
    ):
        B, N, D = x.shape
        if D != self.dim:
            raise DimensionMismatchError(f"Token width {D} does not match block width {self.dim}")
        if mask.shape != (N, N):
            raise DimensionMismatchError(f"Mask {tuple(mask.shape)} does not match sequence length {N}")
        gen_sel = modality_positions(segments, Modality.IMG_G).to(x.device)
        if gen_sel.numel() != N:
            raise DimensionMismatchError(f"Segments cover {gen_sel.numel()} tokens, sequence has {N}")

        h = _route(x, gen_sel, self.base.norm1, self.gen.norm1)
        qkv = _route(h, gen_sel, self.base.qkv, self.gen.qkv)
        q, k, v = qkv.view(B, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)

        scores = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        scores = scores.masked_fill(~mask.to(x.device), float("-inf"))
        probs = scores.softmax(dim=-1)
        attended = (probs @ v).transpose(1, 2).reshape(B, N, D)

        x = x + _route(attended, gen_sel, self.base.out, self.gen.out)
        h = _route(x, gen_sel, self.base.norm2, self.gen.norm2)
        x = x + _route(h, gen_sel, self.base.mlp, self.gen.mlp)
        if return_attention:
            return x, probs
        return x


def block_forward(tokens: torch.Tensor, segments: Sequence[Segment], mask: torch.Tensor, params: BranchedBlock):
    return params(tokens, segments, mask)


class BranchedTransformer(nn.Module):
    """
    Toy MLLM: text embeddings + learned text positions, a 2D positional table for image tokens,
    a stack of BranchedBlocks, branched final norms, a frozen text head and a trainable vision head.
    """

    def __init__(
        self,
        embed_dim: int = 16,
        num_layers: int = 4,
        num_heads: int = 2,
        vocab_size: int = 64,
        max_text_len: int = 16,
        grid_side: int = 8,
        mlp_ratio: int = 4,
    ):
        super().__init__()
        self.embed_dim = embed_dim
        self.grid_side = grid_side
        self.max_text_len = max_text_len
        self.text_embed = nn.Embedding(vocab_size, embed_dim)
        self.text_pos = nn.Embedding(max_text_len, embed_dim)
        self.image_pos = nn.Parameter(torch.randn(grid_side * grid_side, embed_dim) * 0.02)
        self.blocks = nn.ModuleList([BranchedBlock(embed_dim, num_heads, mlp_ratio) for _ in range(num_layers)])
        self.norm_out = RMSNorm(embed_dim)
        self.gen_norm_out = RMSNorm(embed_dim)
        self.text_head = nn.Linear(embed_dim, vocab_size)
        self.vision_head = nn.Linear(embed_dim, embed_dim)
        self.mask_token = MaskToken(embed_dim)

    # --- PARAMETER NAMESPACES ---

    @staticmethod
    def is_generation_parameter(name: str) -> bool:
        return (
            ".gen." in name
            or name.startswith("gen_norm_out.")
            or name.startswith("vision_head.")
            or name.startswith("mask_token.")
        )

    def generation_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if self.is_generation_parameter(n))

    def base_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        return ((n, p) for n, p in self.named_parameters() if not self.is_generation_parameter(n))

    def freeze_base(self) -> None:
        for _, p in self.base_parameters():
            p.requires_grad_(False)

    # --- EMBEDDING ---

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return self.embed_dim, self.grid_side, self.grid_side

    def embed_text(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] > self.max_text_len:
            raise DimensionMismatchError(f"Text of length {tokens.shape[-1]} exceeds {self.max_text_len}")
        positions = torch.arange(tokens.shape[-1], device=tokens.device)
        return self.text_embed(tokens) + self.text_pos(positions)

    def embed_image(self, grids: torch.Tensor, mask_plane: Optional[torch.Tensor] = None) -> torch.Tensor:
        if grids.shape[-3:] != self.grid_shape:
            raise DimensionMismatchError(f"Grid {tuple(grids.shape[-3:])} does not match {self.grid_shape}")
        if mask_plane is not None:
            grids = apply_mask_plane(grids, mask_plane, self.mask_token.embedding)
        return flatten_grid(grids) + self.image_pos.to(grids.dtype)

    def forward(self, pieces: Sequence[Tuple[Modality, torch.Tensor]]) -> Tuple[torch.Tensor, List[Segment]]:
        """
        Run the block stack over a concatenation of embedded pieces.

        Args:
            pieces: [(modality, (B, n_i, d) embeddings), ...] in sequence order

        Returns:
            (final hidden states (B, N, d) after the branched final norm, segments)
        """
        segments = segments_from_lengths([(m, emb.shape[1]) for m, emb in pieces])
        hidden = torch.cat([emb for _, emb in pieces], dim=1)
        mask = build_attention_mask(segments)
        for block in self.blocks:
            hidden = block(hidden, segments, mask)
        gen_sel = modality_positions(segments, Modality.IMG_G).to(hidden.device)
        hidden = _route(hidden, gen_sel, self.norm_out, self.gen_norm_out)
        return hidden, segments

    # --- TASK ENTRY POINTS ---

    def predict_grid(
        self, text_tokens: torch.Tensor, grid: torch.Tensor, mask_plane: Optional[torch.Tensor]
    ) -> torch.Tensor:
        """[Text, ImgG] -> vision-head prediction for every ImgG cell, as a (B, d, H', W') grid."""
        pieces = [(Modality.TEXT, self.embed_text(text_tokens)), (Modality.IMG_G, self.embed_image(grid, mask_plane))]
        return self.predict_from_pieces(pieces)

    def predict_from_pieces(self, pieces: Sequence[Tuple[Modality, torch.Tensor]]) -> torch.Tensor:
        hidden, segments = self(pieces)
        gen = [s for s in segments if s.modality == Modality.IMG_G]
        if len(gen) != 1:
            raise DimensionMismatchError("Exactly one ImgG segment is required for grid prediction")
        seg = gen[0]
        out = vision_head(self, hidden[:, seg.start:seg.start + seg.length])
        side = int(round(seg.length ** 0.5))
        return reshape_to_grid(out, side, side)

    def caption_logits(self, image_grid: torch.Tensor, text_tokens: torch.Tensor) -> torch.Tensor:
        """[ImgU, Text] -> text-head logits at every text position. Only frozen weights are involved."""
        pieces = [(Modality.IMG_U, self.embed_image(image_grid)), (Modality.TEXT, self.embed_text(text_tokens))]
        hidden, segments = self(pieces)
        text = segments[1]
        return text_head(self, hidden[:, text.start:text.start + text.length])

    def text_logits(self, text_tokens: torch.Tensor) -> torch.Tensor:
        hidden, _ = self([(Modality.TEXT, self.embed_text(text_tokens))])
        return text_head(self, hidden)


def vision_head(model: BranchedTransformer, hidden: torch.Tensor) -> torch.Tensor:
    if hidden.shape[-1] != model.vision_head.in_features:
        raise DimensionMismatchError(f"Hidden width {hidden.shape[-1]} does not match vision head")
    return model.vision_head(hidden)


def text_head(model: BranchedTransformer, hidden: torch.Tensor) -> torch.Tensor:
    if hidden.shape[-1] != model.text_head.in_features:
        raise DimensionMismatchError(f"Hidden width {hidden.shape[-1]} does not match text head")
    return model.text_head(hidden)


def init_generation_branch(model: BranchedTransformer, seed: int = 0) -> BranchedTransformer:
    """
    Copy base -> gen for every block and for the final norm, then draw a fresh vision head.
    The mask token is reset to zero. Gen tensors are bit-equal to base afterwards.
    """
    with torch.no_grad():
        for block in model.blocks:
            for (name, gen_p), (_, base_p) in zip(block.gen.named_parameters(), block.base.named_parameters()):
                if gen_p.shape != base_p.shape:
                    raise DimensionMismatchError(f"Gen/base shape mismatch at {name}")
                gen_p.copy_(base_p)
        model.gen_norm_out.weight.copy_(model.norm_out.weight)
        generator = torch.Generator().manual_seed(seed)
        bound = 1.0 / model.embed_dim ** 0.5
        weight = torch.rand(model.vision_head.weight.shape, generator=generator, dtype=torch.float64)
        bias = torch.rand(model.vision_head.bias.shape, generator=generator, dtype=torch.float64)
        model.vision_head.weight.copy_((weight * 2 - 1) * bound)
        model.vision_head.bias.copy_((bias * 2 - 1) * bound)
        model.mask_token.embedding.zero_()
    logger.info(f"Initialised generation branch from base ({len(model.blocks)} blocks, vision head seed={seed})")
    return model


def build_mllm(dims, seed: Optional[int] = None) -> BranchedTransformer:
    if seed is not None:
        torch.manual_seed(seed)
    return BranchedTransformer(
        embed_dim=dims.embed_dim,
        num_layers=dims.num_layers,
        num_heads=dims.num_heads,
        vocab_size=dims.vocab_size,
        max_text_len=dims.max_text_len,
        grid_side=dims.grid_side,
        mlp_ratio=dims.mlp_ratio,
    )


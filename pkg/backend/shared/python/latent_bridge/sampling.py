"""
Euler sampling for the rectified-flow backbone, with optional ControlNet or cross-attention guidance.
"""
import logging
from typing import Optional, Tuple

import torch

from .controlnet import ControlState, CrossAttentionAdapter, LatentControlNet, controlnet_forward
from .errors import OutOfRangeError
from .flow import BlockResiduals, CrossHook, DiffusionBackbone
from .utils import STREAM_NOISE, step_generator

logger = logging.getLogger(__name__)

_T_TOL = 1e-6


def flow_time_grid(steps: int) -> torch.Tensor:
    """steps + 1 equally spaced times from 1 down to 0."""
    if steps < 1:
        raise OutOfRangeError(f"Need at least one sampling step, got {steps}")
    return torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)


def initial_noise(backbone: DiffusionBackbone, batch: int, seed: int) -> torch.Tensor:
    side = backbone.grid_side
    generator = step_generator(seed, 0, STREAM_NOISE)
    return torch.randn((batch, backbone.latent_channels, side, side), generator=generator)


def guided_denoise_step(
    backbone,
    residuals: Optional[BlockResiduals],
    z_t: torch.Tensor,
    t: float,
    dt: float,
    c_text: torch.Tensor,
    cross: Optional[CrossHook] = None,
) -> torch.Tensor:
    """One Euler step z_{t-dt} = z_t - dt * v(z_t, t)."""
    if dt <= 0:
        raise OutOfRangeError(f"Step size must be positive, got {dt}")
    if t - dt < -_T_TOL or t > 1 + _T_TOL:
        raise OutOfRangeError(f"Step from t={t} by dt={dt} leaves [0, 1]")
    if cross is None:
        v = backbone(z_t, float(t), c_text, residuals=residuals)
    else:
        v = backbone(z_t, float(t), c_text, residuals=residuals, cross=cross)
    return z_t - dt * v


@torch.no_grad()
def sample_image(
    backbone: DiffusionBackbone,
    cn: Optional[LatentControlNet],
    c_grid: Optional[torch.Tensor],
    c_text: torch.Tensor,
    steps: int = 28,
    scale: float = 0.7,
    seed: int = 0,
) -> torch.Tensor:
    """
    Integrate from noise (t=1) to data (t=0). With `cn` None the backbone runs unconditioned.

    Returns:
        (B, C, H', W') latent
    """
    times = flow_time_grid(steps)
    z = initial_noise(backbone, c_text.shape[0], seed)
    for i in range(steps):
        t, dt = float(times[i]), float(times[i] - times[i + 1])
        residuals = None
        if cn is not None:
            residuals = controlnet_forward(cn, ControlState(z, t, c_text, c_grid, scale))
        z = guided_denoise_step(backbone, residuals, z, t, dt, c_text)
    return z


def sample_unconditional(backbone: DiffusionBackbone, c_text: torch.Tensor, steps: int = 28, seed: int = 0):
    return sample_image(backbone, None, None, c_text, steps=steps, seed=seed)


@torch.no_grad()
def cross_attention_condition(
    backbone: DiffusionBackbone,
    adapter: CrossAttentionAdapter,
    tokens: torch.Tensor,
    c_text: torch.Tensor,
    steps: int = 28,
    scale: float = 1.0,
    seed: int = 0,
) -> torch.Tensor:
    """Same sampling contract as sample_image, guided by cross-attention to `tokens` (a patch grid)."""
    times = flow_time_grid(steps)
    z = initial_noise(backbone, c_text.shape[0], seed)
    hook = adapter.bind(tokens, scale)
    for i in range(steps):
        t, dt = float(times[i]), float(times[i] - times[i + 1])
        z = guided_denoise_step(backbone, None, z, t, dt, c_text, cross=hook)
    return z


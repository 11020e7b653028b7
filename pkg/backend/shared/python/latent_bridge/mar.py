"""
Masked autoregression over patch grids.

Training: draw a mask ratio from a truncated normal, mask that share of cells, regress the
masked cells with MSE. Inference: unmask cells in a random order over K steps whose sizes
follow a cosine schedule (few cells first, many later).
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.stats import truncnorm

from .config import MaskRatioConfig
from .errors import DimensionMismatchError, OutOfRangeError
from .latent import indices_to_plane

logger = logging.getLogger(__name__)

_STD_EPS = 1e-12


class MaskRatioSampler:
    """
    Seeded rejection sampler for N(mean, std^2) truncated to [low, high].

    The RNG state can be exported and restored so a resumed run draws the same ratios.
    """

    def __init__(self, mean: float = 1.0, std: float = 0.25, low: float = 0.7, high: float = 1.0, seed: int = 0):
        if not 0.0 < low <= high <= 1.0:
            raise OutOfRangeError(f"Mask ratio bounds [{low}, {high}] must lie in (0, 1]")
        if std < 0:
            raise OutOfRangeError(f"Mask ratio std must be >= 0, got {std}")
        self.mean = float(mean)
        self.std = float(std)
        self.low = float(low)
        self.high = float(high)
        self.rng = np.random.default_rng(seed)

    @classmethod
    def from_config(cls, cfg: MaskRatioConfig, seed: int) -> "MaskRatioSampler":
        return cls(cfg.mean, cfg.std, cfg.low, cfg.high, seed)

    def sample(self) -> float:
        if self.std < _STD_EPS:
            return float(min(max(self.mean, self.low), self.high))
        while True:
            value = self.rng.normal(self.mean, self.std)
            if self.low <= value <= self.high:
                return float(value)

    def sample_many(self, n: int) -> np.ndarray:
        return np.array([self.sample() for _ in range(n)])

    def analytic_mean(self) -> float:
        if self.std < _STD_EPS:
            return float(min(max(self.mean, self.low), self.high))
        a, b = (self.low - self.mean) / self.std, (self.high - self.mean) / self.std
        return float(truncnorm.mean(a, b, loc=self.mean, scale=self.std))

    def analytic_std(self) -> float:
        if self.std < _STD_EPS:
            return 0.0
        a, b = (self.low - self.mean) / self.std, (self.high - self.mean) / self.std
        return float(truncnorm.std(a, b, loc=self.mean, scale=self.std))

    def get_state(self) -> Dict[str, Any]:
        return self.rng.bit_generator.state

    def set_state(self, state: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = state


def sample_mask_ratio(sampler: MaskRatioSampler) -> float:
    return sampler.sample()


def mask_count(n_tokens: int, ratio: float) -> int:
    """round-half-up(ratio * n), at least 1."""
    if n_tokens <= 0:
        raise OutOfRangeError(f"Cannot mask a grid with {n_tokens} tokens")
    if not 0.0 < ratio <= 1.0:
        raise OutOfRangeError(f"Mask ratio {ratio} outside (0, 1]")
    return max(1, min(n_tokens, int(math.floor(ratio * n_tokens + 0.5))))


def sample_training_mask(rng: np.random.Generator, n_tokens: int, ratio: float) -> np.ndarray:
    """Uniformly random subset of {0..n_tokens-1} of size mask_count(n_tokens, ratio), sorted."""
    size = mask_count(n_tokens, ratio)
    return np.sort(rng.choice(n_tokens, size=size, replace=False))


def sample_training_planes(
    rng: np.random.Generator, sampler: MaskRatioSampler, batch: int, height: int, width: int
) -> torch.Tensor:
    """One independently drawn ratio and mask per sample -> (B, H', W') boolean planes."""
    planes = []
    for _ in range(batch):
        ratio = sampler.sample()
        planes.append(indices_to_plane(sample_training_mask(rng, height * width, ratio), height, width))
    return torch.stack(planes)


def _as_plane(mask_set, pred: torch.Tensor) -> torch.Tensor:
    h, w = pred.shape[-2:]
    if isinstance(mask_set, torch.Tensor) and mask_set.dtype == torch.bool:
        plane = mask_set
    else:
        plane = indices_to_plane(mask_set, h, w)
    if pred.dim() == 4 and plane.dim() == 2:
        plane = plane.expand(pred.shape[0], h, w)
    if plane.shape != pred.shape[:-3] + pred.shape[-2:]:
        raise DimensionMismatchError(f"Mask {tuple(plane.shape)} does not match grid {tuple(pred.shape)}")
    return plane.to(pred.device)


def masked_mse_loss(pred: torch.Tensor, target: torch.Tensor, mask_set) -> torch.Tensor:
    """
    Mean squared error over masked cells and all channels.

    Args:
        pred, target: (d, H', W') or (B, d, H', W')
        mask_set: raster indices, or a boolean plane (H', W') / (B, H', W')
    """
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"Prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    plane = _as_plane(mask_set, pred)
    if not bool(plane.any()):
        raise OutOfRangeError("Masked MSE needs at least one masked cell")
    diff = (pred - target).movedim(-3, -1)  # (..., H', W', d)
    return diff[plane].pow(2).mean()


# --- INFERENCE SCHEDULE ---

def cosine_step_sizes(n_tokens: int, steps: int) -> List[int]:
    """
    Split n_tokens into `steps` counts following a cosine curve: nondecreasing, each >= 1, summing to n_tokens.
    """
    if not 1 <= steps <= n_tokens:
        raise OutOfRangeError(f"Decoding steps {steps} must be in [1, {n_tokens}]")
    k = np.arange(steps)
    # cos(pi*k/2K) - cos(pi*(k+1)/2K), written as a product of sines
    weights = 2.0 * np.sin(np.pi * (2 * k + 1) / (4 * steps)) * np.sin(np.pi / (4 * steps))
    weights = weights / weights.sum()
    targets = np.maximum.accumulate(1.0 + (n_tokens - steps) * weights)
    sizes = np.floor(targets).astype(np.int64)
    remainder = int(n_tokens - sizes.sum())
    if remainder > 0:
        sizes[steps - remainder:] += 1
    return sizes.tolist()


@dataclass(frozen=True)
class InferenceSchedule:
    steps: Tuple[Tuple[int, ...], ...]

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.steps)

    def validate(self, n_tokens: int) -> None:
        flat = [i for s in self.steps for i in s]
        if not self.steps or any(len(s) == 0 for s in self.steps):
            raise OutOfRangeError("Schedule needs at least one step and no empty steps")
        if len(flat) != n_tokens or sorted(flat) != list(range(n_tokens)):
            raise DimensionMismatchError(f"Schedule does not partition {n_tokens} grid positions")

    def to_lists(self) -> List[List[int]]:
        return [list(s) for s in self.steps]

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int]]) -> "InferenceSchedule":
        return cls(tuple(tuple(int(i) for i in s) for s in lists))


def build_inference_schedule(rng: np.random.Generator, n_tokens: int, steps: int) -> InferenceSchedule:
    sizes = cosine_step_sizes(n_tokens, steps)
    order = rng.permutation(n_tokens)
    bounds = np.cumsum([0] + sizes)
    return InferenceSchedule(tuple(tuple(int(i) for i in order[bounds[j]:bounds[j + 1]]) for j in range(steps)))


# --- GENERATION ---

class GridPredictor(Protocol):
    grid_shape: Tuple[int, int, int]

    def predict_grid(self, text_tokens: torch.Tensor, grid: torch.Tensor, mask_plane: torch.Tensor) -> torch.Tensor:
        ...


@torch.no_grad()
def mar_generate(
    text_tokens: torch.Tensor, model: GridPredictor, schedule: InferenceSchedule
) -> torch.Tensor:
    """
    Start from an all-masked grid; at step k commit the predictions for the cells in set k and
    feed them back as clean embeddings. No cell is predicted twice.

    Returns:
        (B, d, H', W') generated grid
    """
    d, h, w = model.grid_shape
    schedule.validate(h * w)
    batch = text_tokens.shape[0]
    grid = torch.zeros(batch, d, h, w)
    plane = torch.ones(batch, h, w, dtype=torch.bool)
    for cells in schedule.steps:
        pred = model.predict_grid(text_tokens, grid, plane)
        idx = torch.tensor(cells, dtype=torch.long)
        rows, cols = idx // w, idx % w
        grid[:, :, rows, cols] = pred[:, :, rows, cols].to(grid.dtype)
        plane[:, rows, cols] = False
    logger.debug(f"MAR decoded {h * w} cells in {schedule.num_steps} steps")
    return grid

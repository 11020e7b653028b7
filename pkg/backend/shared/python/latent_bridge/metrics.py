"""
Image-quality proxies: PSNR, SSIM and a toy Fréchet distance over frozen toy-encoder features.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
from scipy import linalg
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from .errors import DimensionMismatchError, OutOfRangeError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0


@dataclass
class MetricReport:
    masked_mse: float
    mse: float
    psnr: float
    ssim: float
    toy_frechet: float
    wall_clock: Dict[str, float] = field(default_factory=dict, compare=False)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.masked_mse, self.mse, self.psnr, self.ssim, self.toy_frechet))


def _check_pair(generated: torch.Tensor, reference: torch.Tensor) -> None:
    if generated.shape[0] == 0 or reference.shape[0] == 0:
        raise OutOfRangeError("Metric inputs must not be empty")
    if generated.shape != reference.shape:
        raise DimensionMismatchError(f"Generated {tuple(generated.shape)} vs reference {tuple(reference.shape)}")


def mse(generated: torch.Tensor, reference: torch.Tensor) -> float:
    _check_pair(generated, reference)
    return float((generated.double() - reference.double()).pow(2).mean())


def _per_image(t: torch.Tensor):
    """(n, C, H, W) tensor -> list of (H, W, C) float64 arrays."""
    return list(np.transpose(t.detach().double().cpu().numpy(), (0, 2, 3, 1)))


def psnr(generated: torch.Tensor, reference: torch.Tensor) -> float:
    """Mean over images of PSNR for [0, 1] images, capped at PSNR_CAP for exact matches."""
    _check_pair(generated, reference)
    values = []
    for gen, ref in zip(_per_image(generated), _per_image(reference)):
        if np.array_equal(gen, ref):
            values.append(PSNR_CAP)
            continue
        values.append(min(PSNR_CAP, float(peak_signal_noise_ratio(ref, gen, data_range=1.0))))
    return float(np.mean(values))


def ssim(generated: torch.Tensor, reference: torch.Tensor, window: int = 11) -> float:
    """Mean SSIM (uniform window, per channel, data range 1). The window shrinks to the largest odd side that fits."""
    _check_pair(generated, reference)
    side = min(generated.shape[-2:])
    win_size = min(window, side if side % 2 else side - 1)
    if win_size < 3:
        raise DimensionMismatchError(f"SSIM needs images of at least 3x3, got {tuple(generated.shape[-2:])}")
    values = [
        structural_similarity(ref, gen, data_range=1.0, channel_axis=2, win_size=win_size)
        for gen, ref in zip(_per_image(generated), _per_image(reference))
    ]
    return float(np.mean(values))


def gaussian_stats(features: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    if features.shape[0] < 2:
        return mu, np.zeros((features.shape[1], features.shape[1]))
    return mu, np.atleast_2d(np.cov(features, rowvar=False))


def frechet_from_stats(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> float:
    diff = mu1 - mu2
    covmean = linalg.sqrtm(sigma1.dot(sigma2))
    if not np.isfinite(covmean).all():
        logger.warning(f"Fréchet distance: singular product, adding {eps} to the covariance diagonals")
        offset = np.eye(sigma1.shape[0]) * eps
        covmean = linalg.sqrtm((sigma1 + offset).dot(sigma2 + offset))
    if np.iscomplexobj(covmean):
        if not np.allclose(np.diagonal(covmean).imag, 0, atol=1e-3):
            raise ValueError(f"Fréchet distance: imaginary component {np.max(np.abs(covmean.imag))}")
        covmean = covmean.real
    value = diff.dot(diff) + np.trace(sigma1) + np.trace(sigma2) - 2 * np.trace(covmean)
    return float(max(value, 0.0))


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two (n, d) feature sets; 0 for identical sets."""
    a, b = np.asarray(features_a, dtype=np.float64), np.asarray(features_b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise OutOfRangeError("Fréchet distance needs non-empty feature sets")
    if a.shape[1:] != b.shape[1:]:
        raise DimensionMismatchError(f"Feature widths differ: {a.shape[1:]} vs {b.shape[1:]}")
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    return frechet_from_stats(*gaussian_stats(a), *gaussian_stats(b))


@torch.no_grad()
def encoder_features(images: torch.Tensor, encoder: nn.Module) -> np.ndarray:
    """Spatially mean-pooled encoder grids, (n, d)."""
    return encoder(images).mean(dim=(-2, -1)).double().cpu().numpy()


@torch.no_grad()
def compute_metrics(
    generated: torch.Tensor,
    reference: torch.Tensor,
    encoder: nn.Module,
    generated_grids: Optional[torch.Tensor] = None,
    reference_grids: Optional[torch.Tensor] = None,
    wall_clock: Optional[Dict[str, float]] = None,
) -> MetricReport:
    """
    Args:
        generated, reference: (n, 3, H, W) images in [0, 1]
        encoder: frozen toy encoder used for features and, if grids are not given, for grid MSE
        generated_grids, reference_grids: bridge grids; masked_mse is their MSE over every cell

    Returns:
        MetricReport
    """
    _check_pair(generated, reference)
    if generated_grids is None or reference_grids is None:
        generated_grids, reference_grids = encoder(generated), encoder(reference)
    feats_gen, feats_ref = encoder_features(generated, encoder), encoder_features(reference, encoder)
    return MetricReport(
        masked_mse=mse(generated_grids, reference_grids),
        mse=mse(generated, reference),
        psnr=psnr(generated, reference),
        ssim=ssim(generated, reference),
        toy_frechet=frechet_distance(feats_gen, feats_ref),
        wall_clock=dict(wall_clock or {}),
    )

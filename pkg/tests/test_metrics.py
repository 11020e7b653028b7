import math

import numpy as np
import pytest
import torch

from latent_bridge.errors import DimensionMismatchError, OutOfRangeError
from latent_bridge.latent import ToyEncoder
from latent_bridge.metrics import (
    PSNR_CAP,
    compute_metrics,
    encoder_features,
    frechet_distance,
    frechet_from_stats,
    gaussian_stats,
    mse,
    psnr,
    ssim,
)


@pytest.fixture
def images():
    return torch.rand(6, 3, 32, 32, generator=torch.Generator().manual_seed(0))


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return ToyEncoder(patch_size=4, embed_dim=8, grid_side=8, mixing_layers=1)


def test_identical_images(images, encoder):
    report = compute_metrics(images, images.clone(), encoder)
    assert report.mse == 0
    assert report.masked_mse == 0
    assert report.psnr == PSNR_CAP
    assert report.ssim == pytest.approx(1.0, abs=1e-9)
    assert report.toy_frechet == 0
    assert report.is_finite()


def test_noise_has_low_psnr():
    flat = torch.zeros(4, 3, 32, 32)
    noise = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    assert psnr(noise, flat) < 10


def test_psnr_and_mse_arithmetic():
    a = torch.zeros(1, 3, 4, 4)
    b = torch.full((1, 3, 4, 4), 0.1)
    assert mse(a, b) == pytest.approx(0.01)
    assert psnr(a, b) == pytest.approx(20.0)


def test_ssim_drops_with_noise(images):
    noisy = (images + 0.3 * torch.randn_like(images)).clamp(0, 1)
    assert ssim(noisy, images) < 0.9


def test_ssim_window_shrinks_for_small_images():
    small = torch.rand(2, 3, 6, 6, generator=torch.Generator().manual_seed(2))
    assert ssim(small, small.clone()) == pytest.approx(1.0)
    assert ssim(1.0 - small, small) < 0.5
    with pytest.raises(DimensionMismatchError):
        ssim(small[..., :2, :2], small[..., :2, :2])


def test_shape_errors(images):
    with pytest.raises(DimensionMismatchError):
        mse(images, images[:, :, :16])
    with pytest.raises(OutOfRangeError):
        psnr(images[:0], images[:0])


def test_frechet_of_gaussian_stats():
    mu = np.array([1.0, 2.0])
    sigma = np.eye(2)
    assert frechet_from_stats(mu, sigma, mu, sigma) == pytest.approx(0.0, abs=1e-9)
    # Mean shift only: squared distance of the means.
    assert frechet_from_stats(mu, sigma, mu + np.array([3.0, 4.0]), sigma) == pytest.approx(25.0)
    # Scaled covariance in 1-d: (s1 - s2)^2 on the standard deviations.
    value = frechet_from_stats(np.zeros(1), np.array([[4.0]]), np.zeros(1), np.array([[1.0]]))
    assert value == pytest.approx(1.0)


def test_frechet_split_half_is_near_zero():
    rng = np.random.default_rng(0)
    features = rng.normal(size=(4000, 4)) @ np.diag([1.0, 0.5, 2.0, 1.5]) + 3.0
    assert frechet_distance(features[:2000], features[2000:]) < 0.05


def test_frechet_separates_shifted_sets():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(500, 3))
    assert frechet_distance(a, a + 2.0) == pytest.approx(12.0, rel=0.05)
    with pytest.raises(DimensionMismatchError):
        frechet_distance(a, a[:, :2])
    with pytest.raises(OutOfRangeError):
        frechet_distance(a[:0], a)


def test_single_sample_stats_are_degenerate():
    mu, sigma = gaussian_stats(np.ones((1, 3)))
    assert mu.tolist() == [1.0, 1.0, 1.0]
    assert not sigma.any()


def test_encoder_features_and_grid_mse(images, encoder):
    feats = encoder_features(images, encoder)
    assert feats.shape == (6, 8)
    grids = encoder(images).detach()
    report = compute_metrics(images, images, encoder, generated_grids=grids + 1.0, reference_grids=grids,
                             wall_clock={"decode": 1.5})
    assert report.masked_mse == pytest.approx(1.0)
    assert report.wall_clock == {"decode": 1.5}
    assert math.isfinite(report.to_dict()["psnr"])

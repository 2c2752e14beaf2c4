import math

import numpy as np
import pytest

from learned_beamforming import metrics
from learned_beamforming.errors import DataError, NumericalError
from learned_beamforming.metrics import (
    LossConfig,
    Region,
    RegionSpec,
    cnr,
    combined_loss,
    downsample,
    fwhm,
    gaussian_window,
    ms_ssim,
    ms_ssim_loss,
    psnr,
    psnr_loss,
    ssim,
)


def _naive_ssim(x, y, window):
    # explicit windowed sums over every valid position
    size = len(window)
    w2 = np.outer(window, window)
    values = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px, py = x[i : i + size, j : j + size], y[i : i + size, j : j + size]
            mx, my = (w2 * px).sum(), (w2 * py).sum()
            vx = (w2 * px * px).sum() - mx**2
            vy = (w2 * py * py).sum() - my**2
            cxy = (w2 * px * py).sum() - mx * my
            lum = (2 * mx * my + metrics.C1) / (mx**2 + my**2 + metrics.C1)
            cs = (2 * cxy + metrics.C2) / (vx + vy + metrics.C2)
            values.append(lum * cs)
    return float(np.mean(values))


def test_psnr_values():
    x = np.zeros((8, 8))
    assert psnr(x, x) == math.inf
    assert psnr(x, np.full((8, 8), 0.01)) == pytest.approx(40.0)
    assert psnr_loss(x, x) == 0.0
    assert psnr_loss(x, np.full((8, 8), 0.1)) == pytest.approx(0.6)


def test_psnr_loss_matches_pixel_loop(rng):
    x = rng.uniform(0, 1, (12, 9))
    y = np.full_like(x, 0.4)
    total = 0.0
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            total += (x[i, j] - y[i, j]) ** 2
    expected = 1 - min(10 * math.log10(1 / (total / x.size)), 50) / 50
    assert abs(psnr_loss(x, y) - expected) < 1e-10


def test_psnr_loss_clamps_to_unit_interval(rng):
    x = rng.uniform(0, 1, (8, 8))
    assert psnr_loss(x, x + 1e-9) == 0.0
    assert psnr_loss(np.zeros((8, 8)), np.full((8, 8), 3.0)) == 1.0


def test_ssim_matches_naive_windows(rng):
    cfg = LossConfig(msssim_window=7)
    x = rng.uniform(0, 1, (16, 16))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    expected = _naive_ssim(x, y, gaussian_window(7, 1.5))
    assert abs(ssim(x, y, cfg) - expected) < 1e-8
    assert ssim(x, y, cfg) == pytest.approx(ssim(y, x, cfg))
    assert ssim(x, x, cfg) == pytest.approx(1.0)


def test_ms_ssim_loss_identity_and_single_scale(rng):
    x = rng.uniform(0, 1, (48, 48))
    y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
    assert abs(ms_ssim_loss(x, x)) < 1e-12
    single = LossConfig(msssim_scales=1)
    assert abs(ms_ssim_loss(x, y, single) - (1 - ssim(x, y, single))) < 1e-12
    assert 0 < ms_ssim_loss(x, y) < 1


def test_ms_ssim_loss_exceeds_one_for_inverted_structure():
    checker = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.float64)
    assert ms_ssim_loss(checker, 1 - checker) > 1


def test_ms_ssim_rejects_small_images():
    cfg = LossConfig()
    assert cfg.min_size == 44
    with pytest.raises(DataError):
        ms_ssim(np.zeros((43, 64)), np.zeros((43, 64)), cfg)
    with pytest.raises(DataError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), cfg)
    with pytest.raises(DataError):
        ms_ssim(np.zeros((64, 64)), np.zeros((64, 63)), cfg)


def test_downsample_crops_odd_sizes():
    image = np.arange(35, dtype=np.float64).reshape(5, 7)
    small = downsample(image)
    assert small.shape == (2, 3)
    assert small[0, 0] == pytest.approx((0 + 1 + 7 + 8) / 4)


def test_combined_loss_mixes_components(rng, monkeypatch):
    x = rng.uniform(0, 1, (48, 48))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert combined_loss(x, x) == pytest.approx(0.0, abs=1e-12)
    psnr_only = LossConfig(alpha=0.0)
    assert combined_loss(x, y, psnr_only) == psnr_loss(x, y, psnr_only)

    monkeypatch.setattr(metrics, 'ms_ssim_loss', lambda *args: 0.2)
    monkeypatch.setattr(metrics, 'psnr_loss', lambda *args: 0.4)
    assert combined_loss(x, y, LossConfig(alpha=0.75)) == pytest.approx(0.25)


@pytest.mark.parametrize(
    'overrides',
    [{'alpha': 1.5}, {'psnr_max': 0.0}, {'msssim_scales': 0}, {'msssim_window': 8}, {'msssim_sigma': 0.0}],
)
def test_loss_config_validation(overrides):
    with pytest.raises(DataError):
        LossConfig(**overrides)


def _two_level_image():
    # inside: rows 0-7 alternate 0.7/0.9, outside: rows 8-15 alternate 0.1/0.3
    image = np.empty((16, 8))
    image[:8] = np.where(np.indices((8, 8)).sum(axis=0) % 2, 0.9, 0.7)
    image[8:] = np.where(np.indices((8, 8)).sum(axis=0) % 2, 0.3, 0.1)
    spec = RegionSpec(Region('rect', (0, 8, 0, 8)), Region('rect', (8, 16, 0, 8)))
    return image, spec


def test_cnr_of_known_regions():
    image, spec = _two_level_image()
    value = cnr(image, spec)
    assert value == pytest.approx(20 * math.log10(0.6 / math.sqrt(0.02)))
    assert abs(value - 12.56) < 0.01
    assert cnr(3 * image, spec) == pytest.approx(value)


def test_cnr_needs_contrast_and_variance():
    image, spec = _two_level_image()
    same = image.copy()
    same[8:] = same[:8]
    with pytest.raises(NumericalError):
        cnr(same, spec)
    with pytest.raises(NumericalError):
        cnr(np.full((16, 8), 0.5), spec)


def test_cnr_region_validation():
    image = np.zeros((32, 32))
    overlapping = RegionSpec(Region('circle', (10, 10, 5)), Region('rect', (0, 32, 0, 16)))
    with pytest.raises(DataError):
        cnr(image, overlapping)
    tiny = RegionSpec(Region('circle', (5, 5, 1)), Region('rect', (16, 32, 16, 32)))
    with pytest.raises(DataError):
        cnr(image, tiny)


def test_region_spec_from_dict():
    spec = RegionSpec.from_dict({
        'inside': {'shape': 'circle', 'center': [16, 16], 'radius': 4},
        'outside': {'shape': 'rect', 'rows': [0, 8], 'cols': [0, 32]},
    })
    inside, outside = spec.masks((32, 32))
    assert inside.sum() == 49
    assert outside.sum() == 256
    with pytest.raises(DataError):
        RegionSpec.from_dict({'inside': {'shape': 'circle', 'center': [1, 1], 'radius': 1}})
    with pytest.raises(DataError):
        Region.from_dict({'shape': 'ellipse'})


def test_fwhm_of_triangle():
    profile = np.maximum(0.0, 1 - 0.1 * np.abs(np.arange(21) - 10))
    assert fwhm(profile, 0.1e-3) == pytest.approx(1.0e-3)
    assert fwhm(5 * profile, 0.1e-3) == pytest.approx(1.0e-3)


def test_fwhm_of_gaussian():
    fine = np.arange(-2000, 2001) * 0.01
    assert fwhm(np.exp(-(fine**2) / 8), 0.01) == pytest.approx(4.7096, abs=1e-3)
    coarse = np.arange(-20, 21, dtype=np.float64)
    assert fwhm(np.exp(-(coarse**2) / 8), 1.0) == pytest.approx(4.71, abs=0.1)


@pytest.mark.parametrize(
    'profile',
    [np.ones(10), np.zeros(10), np.array([1.0, 0.9, 0.8, 0.7]), np.array([0.2, 1.0, 0.2, 1.0, 0.2])],
)
def test_fwhm_undefined_profiles(profile):
    with pytest.raises(NumericalError):
        fwhm(profile, 1.0)


def test_point_fwhm_of_separable_spot():
    rows = np.maximum(0.0, 1 - 0.25 * np.abs(np.arange(31) - 12))
    cols = np.maximum(0.0, 1 - 0.5 * np.abs(np.arange(21) - 9))
    axial, lateral = metrics.point_fwhm(np.outer(rows, cols), 2.0, 3.0)
    assert axial == pytest.approx(4 * 2.0)
    assert lateral == pytest.approx(2 * 3.0)

"""Image quality metrics and the reconstruction losses on [0,1] images.

SSIM uses an ``msssim_window`` Gaussian window (valid filtering) with the unit-range constants
C1 = 0.01^2 and C2 = 0.03^2. MS-SSIM multiplies the mean contrast-structure term of every scale but
the coarsest with the mean SSIM of the coarsest scale, so a single scale reduces to SSIM.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np
from scipy.signal import convolve2d

from .errors import DataError, NumericalError

C1 = 0.01**2
C2 = 0.03**2
MIN_REGION_PIXELS = 16


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.75
    psnr_max: float = 50.0
    msssim_scales: int = 3
    msssim_window: int = 11
    msssim_sigma: float = 1.5

    def __post_init__(self) -> None:
        if not 0 <= self.alpha <= 1:
            msg = f'alpha must lie in [0,1], got {self.alpha}'
            raise DataError(msg)
        if self.psnr_max <= 0:
            msg = f'psnr_max must be > 0, got {self.psnr_max}'
            raise DataError(msg)
        if self.msssim_scales < 1:
            msg = f'msssim_scales must be >= 1, got {self.msssim_scales}'
            raise DataError(msg)
        if self.msssim_window < 1 or self.msssim_window % 2 == 0 or self.msssim_sigma <= 0:
            msg = 'msssim_window must be a positive odd size and msssim_sigma > 0'
            raise DataError(msg)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LossConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            msg = f'Unknown LossConfig keys: {sorted(unknown)}'
            raise DataError(msg)
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def min_size(self) -> int:
        """Smallest image side the MS-SSIM pyramid accepts."""
        return self.msssim_window * 2 ** (self.msssim_scales - 1)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _pair(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        msg = f'Image shapes differ: {x.shape} vs {y.shape}'
        raise DataError(msg)
    return x, y


def mse(x: np.ndarray, y: np.ndarray) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images (+inf when identical)."""
    err = mse(x, y)
    if err == 0:
        return math.inf
    return 10 * math.log10(1 / err)


def l1_loss(x: np.ndarray, y: np.ndarray) -> float:
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


def psnr_loss(x: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> float:
    """``1 - PSNR/psnr_max`` with PSNR clamped to ``[0, psnr_max]``."""
    cfg = cfg or LossConfig()
    value = min(max(psnr(x, y), 0.0), cfg.psnr_max)
    return 1 - value / cfg.psnr_max


def _filter(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    # separable valid filtering; the window is symmetric so convolution equals correlation
    return convolve2d(convolve2d(image, window[:, None], mode='valid'), window[None, :], mode='valid')


def ssim_maps(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Luminance and contrast-structure maps over the valid window positions."""
    mu_x = _filter(x, window)
    mu_y = _filter(y, window)
    sxx = _filter(x * x, window) - mu_x**2
    syy = _filter(y * y, window) - mu_y**2
    sxy = _filter(x * y, window) - mu_x * mu_y
    luminance = (2 * mu_x * mu_y + C1) / (mu_x**2 + mu_y**2 + C1)
    contrast_structure = (2 * sxy + C2) / (sxx + syy + C2)
    return luminance, contrast_structure


def ssim(x: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    x, y = _pair(x, y)
    if min(x.shape) < cfg.msssim_window:
        msg = f'Image {x.shape} smaller than the {cfg.msssim_window}-pixel SSIM window'
        raise DataError(msg)
    lum, cs = ssim_maps(x, y, gaussian_window(cfg.msssim_window, cfg.msssim_sigma))
    return float(np.mean(lum * cs))


def downsample(image: np.ndarray) -> np.ndarray:
    """2x2 average pooling after cropping to even size."""
    rows, cols = (s - s % 2 for s in image.shape)
    img = image[:rows, :cols]
    return img.reshape(rows // 2, 2, cols // 2, 2).mean(axis=(1, 3))


def ms_ssim(x: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    x, y = _pair(x, y)
    if min(x.shape) < cfg.min_size:
        msg = f'Image {x.shape} too small for {cfg.msssim_scales} MS-SSIM scales (needs {cfg.min_size})'
        raise DataError(msg)
    window = gaussian_window(cfg.msssim_window, cfg.msssim_sigma)
    value = 1.0
    for scale in range(cfg.msssim_scales):
        lum, cs = ssim_maps(x, y, window)
        if scale == cfg.msssim_scales - 1:
            value *= float(np.mean(lum * cs))
        else:
            value *= float(np.mean(cs))
            x, y = downsample(x), downsample(y)
    return value


def ms_ssim_loss(x: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> float:
    """``1 - l_M * prod(cs_j)``; 0 at structural identity, up to 2 for inverted structure."""
    return 1 - ms_ssim(x, y, cfg)


def combined_loss(x: np.ndarray, y: np.ndarray, cfg: LossConfig | None = None) -> float:
    """Ultrasound loss ``alpha * L_MS-SSIM + (1 - alpha) * L_PSNR``."""
    cfg = cfg or LossConfig()
    return cfg.alpha * ms_ssim_loss(x, y, cfg) + (1 - cfg.alpha) * psnr_loss(x, y, cfg)


@dataclass(frozen=True)
class Region:
    """Pixel region of an image: ``circle`` (row, col, radius) or ``rect`` (row0, row1, col0, col1), half-open."""

    shape: str
    bounds: tuple[float, ...]

    def __post_init__(self) -> None:
        expected = {'circle': 3, 'rect': 4}
        if self.shape not in expected or len(self.bounds) != expected[self.shape]:
            msg = f'Invalid region: {self.shape} {self.bounds}'
            raise DataError(msg)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Region:
        if data.get('shape') == 'circle':
            return cls('circle', (*data['center'], data['radius']))
        if data.get('shape') == 'rect':
            return cls('rect', (*data['rows'], *data['cols']))
        msg = f'Unknown region shape: {data.get("shape")!r}'
        raise DataError(msg)

    def mask(self, image_shape: tuple[int, int]) -> np.ndarray:
        rows, cols = np.indices(image_shape)
        if self.shape == 'circle':
            r0, c0, radius = self.bounds
            return (rows - r0) ** 2 + (cols - c0) ** 2 <= radius**2
        r0, r1, c0, c1 = self.bounds
        return (rows >= r0) & (rows < r1) & (cols >= c0) & (cols < c1)


@dataclass(frozen=True)
class RegionSpec:
    inside: Region
    outside: Region

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RegionSpec:
        try:
            return cls(Region.from_dict(data['inside']), Region.from_dict(data['outside']))
        except KeyError as e:
            msg = f'Region spec missing key: {e}'
            raise DataError(msg) from e

    def masks(self, image_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        inside = self.inside.mask(image_shape)
        outside = self.outside.mask(image_shape)
        if np.any(inside & outside):
            msg = 'CNR regions must be disjoint'
            raise DataError(msg)
        if inside.sum() < MIN_REGION_PIXELS or outside.sum() < MIN_REGION_PIXELS:
            msg = f'CNR regions need at least {MIN_REGION_PIXELS} pixels each'
            raise DataError(msg)
        return inside, outside


def cnr(display: np.ndarray, regions: RegionSpec) -> float:
    """Contrast-to-noise ratio in dB, ``20 log10(|mu_in - mu_out| / sqrt(var_in + var_out))``."""
    image = np.asarray(display, dtype=np.float64)
    inside, outside = regions.masks(image.shape)
    a, b = image[inside], image[outside]
    pooled = math.sqrt(a.var() + b.var())
    contrast = abs(a.mean() - b.mean())
    if pooled == 0:
        msg = 'CNR undefined: zero pooled variance'
        raise NumericalError(msg)
    if contrast == 0:
        msg = 'CNR undefined: zero contrast between regions'
        raise NumericalError(msg)
    return 20 * math.log10(contrast / pooled)


def _crossing(profile: np.ndarray, peak: int, half: float, step: int) -> float:
    i = peak
    while 0 <= i + step < len(profile):
        nxt = i + step
        if profile[nxt] <= half:
            # linear interpolation between the last sample above and the first at/below half
            return i + step * (profile[i] - half) / (profile[i] - profile[nxt])
        i = nxt
    msg = 'FWHM undefined: profile truncated before reaching half maximum'
    raise NumericalError(msg)


def fwhm(profile: np.ndarray, sample_spacing: float) -> float:
    """Full width at half maximum around the global peak, in units of ``sample_spacing``."""
    p = np.asarray(profile, dtype=np.float64).ravel()
    if p.size == 0:
        msg = 'FWHM of an empty profile'
        raise NumericalError(msg)
    peak = int(np.argmax(p))
    top = p[peak]
    if top <= 0 or np.count_nonzero(p == top) > 1:
        msg = 'FWHM needs a unique positive maximum'
        raise NumericalError(msg)
    half = top / 2
    left = _crossing(p, peak, half, -1)
    right = _crossing(p, peak, half, +1)
    return (right - left) * sample_spacing


def point_fwhm(envelope_image: np.ndarray, axial_spacing: float, lateral_spacing: float) -> tuple[float, float]:
    """Axial and lateral FWHM through the brightest pixel of an envelope image ``[samples, scanlines]``."""
    env = np.asarray(envelope_image, dtype=np.float64)
    n, k = np.unravel_index(int(np.argmax(env)), env.shape)
    return fwhm(env[:, k], axial_spacing), fwhm(env[n, :], lateral_spacing)

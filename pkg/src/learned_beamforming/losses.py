"""Differentiable training losses on engine tensors.

Same definitions as :mod:`learned_beamforming.metrics`, built from engine ops so the gradient reaches
the network. Images are batches ``[B, 1, H, W]``; each loss is computed per image and averaged over
the batch.
"""

from __future__ import annotations

import math
from collections.abc import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError
from .metrics import C1, C2, LossConfig, gaussian_window

LOSS_NAMES = ('l1', 'psnr', 'psnr-msssim')

_IMAGE_AXES = (1, 2, 3)


def _check(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        msg = f'Prediction {pred.shape} and target {target.shape} shapes differ'
        raise DataError(msg)
    if pred.ndim != 4 or pred.shape[1] != 1:
        msg = f'Losses expect [B, 1, H, W] images, got {pred.shape}'
        raise DataError(msg)


def l1(pred: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    target = ag.as_tensor(target)
    _check(pred, target)
    return ag.absolute(pred - target).mean()


def psnr_loss(pred: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    """``1 - PSNR/psnr_max``; clamping the MSE to ``[10^(-psnr_max/10), 1]`` clamps PSNR to ``[0, psnr_max]``."""
    cfg = cfg or LossConfig()
    target = ag.as_tensor(target)
    _check(pred, target)
    err = ((pred - target) ** 2).mean(axis=_IMAGE_AXES)
    err = ag.clamp(err, 10 ** (-cfg.psnr_max / 10), 1.0)
    value = ag.log(err) * (-10 / math.log(10))
    return (1 - value / cfg.psnr_max).mean()


def _gaussian_filter(image: Tensor, taps: np.ndarray) -> Tensor:
    vertical = ag.tensor(taps.reshape(1, 1, -1, 1))
    horizontal = ag.tensor(taps.reshape(1, 1, 1, -1))
    return ag.conv2d(ag.conv2d(image, vertical), horizontal)


def _ssim_terms(x: Tensor, y: Tensor, taps: np.ndarray) -> tuple[Tensor, Tensor]:
    mu_x = _gaussian_filter(x, taps)
    mu_y = _gaussian_filter(y, taps)
    sxx = _gaussian_filter(x * x, taps) - mu_x * mu_x
    syy = _gaussian_filter(y * y, taps) - mu_y * mu_y
    sxy = _gaussian_filter(x * y, taps) - mu_x * mu_y
    luminance = (2 * mu_x * mu_y + C1) / (mu_x * mu_x + mu_y * mu_y + C1)
    contrast_structure = (2 * sxy + C2) / (sxx + syy + C2)
    return luminance, contrast_structure


def ms_ssim_loss(pred: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    target = ag.as_tensor(target)
    _check(pred, target)
    if min(pred.shape[2:]) < cfg.min_size:
        msg = f'Image {pred.shape[2:]} too small for {cfg.msssim_scales} MS-SSIM scales (needs {cfg.min_size})'
        raise DataError(msg)
    taps = gaussian_window(cfg.msssim_window, cfg.msssim_sigma)
    x, y = pred, target
    value = None
    for scale in range(cfg.msssim_scales):
        lum, cs = _ssim_terms(x, y, taps)
        last = scale == cfg.msssim_scales - 1
        term = (lum * cs if last else cs).mean(axis=_IMAGE_AXES)
        value = term if value is None else value * term
        if not last:
            x, y = ag.avg_pool2x(x), ag.avg_pool2x(y)
    return (1 - value).mean()


def combined_loss(pred: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    target = ag.as_tensor(target)
    if cfg.alpha == 0:
        return psnr_loss(pred, target, cfg)
    return cfg.alpha * ms_ssim_loss(pred, target, cfg) + (1 - cfg.alpha) * psnr_loss(pred, target, cfg)


LossFn = Callable[[Tensor, Tensor, LossConfig | None], Tensor]


def get_loss(name: str) -> LossFn:
    """Training objective by name: ``l1``, ``psnr`` or ``psnr-msssim`` (the combined loss)."""
    table: dict[str, LossFn] = {'l1': l1, 'psnr': psnr_loss, 'psnr-msssim': combined_loss}
    try:
        return table[name]
    except KeyError:
        msg = f'Unknown loss {name!r}; choose from {", ".join(LOSS_NAMES)}'
        raise DataError(msg) from None

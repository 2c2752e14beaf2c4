"""Image comparison reports and the phantom quality table (CNR and point-target FWHM per method)."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import metrics
from .beamform import BeamformConfig, beamform_rf, envelope, envelope_log_compress
from .container import read_rf
from .errors import DataError
from .metrics import LossConfig, Region, RegionSpec
from .network import FCNN, forward
from .sim import TransducerConfig, apply_receive_delays, cyst_phantom, simulate_channel_data, wire_phantom
from .utils import is_frame_file, is_image_file, read_pgm, read_pgm_metadata

log = logging.getLogger(__name__)

# Clinical phantom values per method: CNR [dB], FWHM axial/lateral [mm], resolution axial/lateral [mm].
REFERENCE_QUALITY_TABLE = {
    'das': {'cnr_db': 10.7, 'fwhm_axial_mm': 0.339, 'fwhm_lateral_mm': 0.780, 'resolution_mm': (0.25, 1.0)},
    'mv': {'cnr_db': 9.30, 'fwhm_axial_mm': 0.326, 'fwhm_lateral_mm': 0.301, 'resolution_mm': (0.25, 1.0)},
    'net': {'cnr_db': 8.68, 'fwhm_axial_mm': 0.332, 'fwhm_lateral_mm': 0.425, 'resolution_mm': (0.44, 1.0)},
}

QUALITY_METHODS = ('das', 'mv', 'net')

_IMAGE_METRICS: dict[str, Callable[[np.ndarray, np.ndarray, LossConfig], float]] = {
    'ssim': metrics.ssim,
    'psnr': lambda a, b, cfg: metrics.psnr(a, b),
    'msssim': metrics.ms_ssim,
    'mse': lambda a, b, cfg: metrics.mse(a, b),
    'l1': lambda a, b, cfg: metrics.l1_loss(a, b),
    'psnr_loss': metrics.psnr_loss,
    'msssim_loss': metrics.ms_ssim_loss,
    'combined_loss': metrics.combined_loss,
}
IMAGE_METRICS = tuple(_IMAGE_METRICS)


def compare_images(
    a: np.ndarray, b: np.ndarray, names: Iterable[str], cfg: LossConfig | None = None
) -> list[dict[str, Any]]:
    """``{metric, value, config}`` records for every requested metric."""
    cfg = cfg or LossConfig()
    records = []
    for name in names:
        if name not in _IMAGE_METRICS:
            msg = f'Unknown metric {name!r}; choose from {", ".join(IMAGE_METRICS)}'
            raise DataError(msg)
        records.append({'metric': name, 'value': _IMAGE_METRICS[name](a, b, cfg), 'config': cfg.to_dict()})
    return records


def cnr_record(display: np.ndarray, regions: RegionSpec) -> dict[str, Any]:
    return {'metric': 'cnr_db', 'value': metrics.cnr(display, regions), 'config': None}


def fwhm_records(image: np.ndarray, spec: str, axial_spacing: float = 1.0, lateral_spacing: float = 1.0) -> list[dict]:
    """FWHM of an envelope image along a profile chosen by ``spec``.

    ``auto`` measures both directions through the brightest pixel, ``row=N`` the lateral profile
    of row N and ``col=K`` the axial profile of column K. Spacings default to pixels.
    """
    image = np.asarray(image, dtype=np.float64)
    config = {'profile': spec, 'axial_spacing': axial_spacing, 'lateral_spacing': lateral_spacing}
    if spec == 'auto':
        axial, lateral = metrics.point_fwhm(image, axial_spacing, lateral_spacing)
        return [
            {'metric': 'fwhm_axial', 'value': axial, 'config': config},
            {'metric': 'fwhm_lateral', 'value': lateral, 'config': config},
        ]
    key, _, value = spec.partition('=')
    try:
        index = int(value)
    except ValueError:
        index = -1
    limit = {'row': image.shape[0], 'col': image.shape[1]}.get(key, 0)
    if not 0 <= index < limit:
        msg = f'Invalid FWHM profile spec {spec!r} for image {image.shape} (use auto, row=N or col=K)'
        raise DataError(msg)
    if key == 'row':
        return [{'metric': 'fwhm_lateral', 'value': metrics.fwhm(image[index], lateral_spacing), 'config': config}]
    return [{'metric': 'fwhm_axial', 'value': metrics.fwhm(image[:, index], axial_spacing), 'config': config}]


def display_to_envelope(display: np.ndarray, dynamic_range_db: float) -> np.ndarray:
    """Undo log compression (relative envelope; the clipped floor maps to ``10^(-DR/20)``)."""
    return 10 ** ((np.asarray(display, dtype=np.float64) - 1) * dynamic_range_db / 20)


def wire_depth(config: TransducerConfig) -> float:
    return min(20e-3, 0.5 * config.max_depth)


def cyst_geometry(config: TransducerConfig) -> tuple[float, float, float]:
    """Centre (x, z) and radius of the evaluation cyst."""
    lateral_extent = config.scanline_positions[-1] - config.scanline_positions[0]
    radius = min(0.3 * lateral_extent, 0.12 * config.max_depth)
    return 0.0, 0.5 * config.max_depth, radius


def cyst_regions(config: TransducerConfig) -> RegionSpec:
    """Inside: box inscribed in the cyst. Outside: same-size box of speckle below it."""
    _, cz, radius = cyst_geometry(config)
    half_rows = max(2, round(0.7 * radius / config.depth_spacing))
    half_cols = max(2, round(0.7 * radius / config.scanline_spacing))
    center_row = round(cz / config.depth_spacing)
    center_col = config.num_scanlines // 2
    cols = (center_col - half_cols, center_col + half_cols)
    inside = Region('rect', (center_row - half_rows, center_row + half_rows, *cols))
    below = center_row + round(2 * radius / config.depth_spacing)
    outside = Region('rect', (below, below + 2 * half_rows, *cols))
    return RegionSpec(inside, outside)


def _images(
    frame, method: str, net: FCNN | None, bf: BeamformConfig
) -> tuple[np.ndarray, np.ndarray]:
    """(envelope, display) of one method."""
    if method == 'net':
        if net is None:
            msg = 'Method net needs a trained model'
            raise DataError(msg)
        display = forward(net, frame)
        return display_to_envelope(display, bf.dynamic_range_db), display
    rf = beamform_rf(frame, BeamformConfig(**{**bf.to_dict(), 'method': method}))
    return envelope(rf), envelope_log_compress(rf, bf.dynamic_range_db)


def phantom_quality(
    config: TransducerConfig | None = None,
    methods: Sequence[str] = ('das', 'mv'),
    net: FCNN | None = None,
    *,
    beamform: BeamformConfig | None = None,
    seed: int = 0,
) -> dict[str, Any]:
    """CNR on a simulated anechoic cyst and FWHM on a simulated wire, per reconstruction method.

    FWHM is measured on the envelope; for the network the display image is expanded back to a
    relative envelope. Resolution by distinguishable wires is not measured.
    """
    config = config or TransducerConfig()
    bf = beamform or BeamformConfig()
    unknown = set(methods) - set(QUALITY_METHODS)
    if unknown:
        msg = f'Unknown methods: {sorted(unknown)}'
        raise DataError(msg)
    # on a scanline axis, so the lateral profile has a single peak
    wire_x = float(config.scanline_positions[config.num_scanlines // 2])
    wire = apply_receive_delays(simulate_channel_data(wire_phantom(wire_depth(config), wire_x), config, seed))
    cx, cz, radius = cyst_geometry(config)
    cyst = apply_receive_delays(simulate_channel_data(cyst_phantom(config, (cx, cz), radius, seed=seed), config, seed))
    regions = cyst_regions(config)
    rows = {}
    for method in methods:
        env, _ = _images(wire, method, net, bf)
        axial, lateral = metrics.point_fwhm(env, config.depth_spacing, config.scanline_spacing)
        _, display = _images(cyst, method, net, bf)
        rows[method] = {
            'cnr_db': metrics.cnr(display, regions),
            'fwhm_axial_mm': axial * 1e3,
            'fwhm_lateral_mm': lateral * 1e3,
        }
        log.info(
            '[table2] %s: CNR %.2f dB, FWHM axial %.3f mm, lateral %.3f mm',
            method,
            rows[method]['cnr_db'],
            axial * 1e3,
            lateral * 1e3,
        )
    return {
        'methods': rows,
        'reference': {m: REFERENCE_QUALITY_TABLE[m] for m in methods},
        'resolution': 'not reproduced (distinguishable-wire protocol unspecified)',
        'config': config.to_dict(),
        'beamform': bf.to_dict(),
        'seed': seed,
    }


@dataclass(frozen=True)
class LoadedImage:
    display: np.ndarray
    envelope: np.ndarray
    metadata: dict[str, Any]
    axial_spacing: float = 1.0
    lateral_spacing: float = 1.0


def load_image(path: Path | str) -> LoadedImage:
    """Read a graymap (display) or a USRB rf image, recovering spacings from its metadata."""
    path = Path(path)
    if is_frame_file(path) or not is_image_file(path):
        msg = f'Unsupported image extension: {path.suffix}'
        raise DataError(msg)
    if path.suffix.lower() == '.pgm':
        display = read_pgm(path)
        meta = read_pgm_metadata(path)
        env = display_to_envelope(display, float(meta.get('dynamic_range_db', 60.0)))
    else:
        rf, meta = read_rf(path)
        rf = rf.astype(np.float64)
        env = envelope(rf)
        display = envelope_log_compress(rf, float(meta.get('dynamic_range_db', 60.0)))
    spacing = {}
    if isinstance(meta.get('config'), dict):
        config = TransducerConfig.from_dict(meta['config'])
        spacing = {'axial_spacing': config.depth_spacing, 'lateral_spacing': config.scanline_spacing}
    return LoadedImage(display, env, meta, **spacing)

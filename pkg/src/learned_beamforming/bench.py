"""Per-frame reconstruction latency of DAS, MV and the learned network on identical frames."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from .beamform import (
    BeamformConfig,
    CovarianceSnapshot,
    apodization,
    beamform_rf,
    default_loading,
    default_subarray,
    estimate_covariance,
    mv_weights,
    reconstruct,
)
from .errors import DataError, NumericalError
from .network import FCNN, InferencePlan, forward
from .sim import DelayedFrame

log = logging.getLogger(__name__)

BENCH_METHODS = ('das', 'mv', 'net')
MIN_FRAMES = 10
WARMUP_FRAMES = 3
NET_ATOL = 1e-4


@dataclass(frozen=True)
class BenchReport:
    method: str
    frames: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    fps: float
    workers: int
    input_shape: tuple[int, int, int]
    speedup_vs_mv: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile (1-based rank) of unsorted values."""
    ordered = sorted(values)
    rank = max(1, min(len(ordered), round(p * len(ordered))))
    return ordered[rank - 1]


def _reconstructor(method: str, workers: int, net: FCNN | None, beamform: BeamformConfig) -> Callable:
    if method == 'net':
        if net is None:
            msg = 'Benchmarking net needs a model'
            raise DataError(msg)
        return InferencePlan(net)
    cfg = BeamformConfig(**{**beamform.to_dict(), 'method': method, 'workers': workers})
    return lambda frame: reconstruct(frame, cfg).display


def _mv_pixel(y: np.ndarray, n: int, length: int, eps: float, temporal_avg: int) -> float:
    """MV output at sample ``n`` of one scanline ``y [M, N]``, one covariance per snapshot."""
    lo, hi = max(0, n - temporal_avg), min(y.shape[1], n + temporal_avg + 1)
    R = np.mean([estimate_covariance(y[:, j], length).matrix for j in range(lo, hi)], axis=0)
    trace = np.trace(R)
    if trace == 0:
        return 0.0
    R = R + eps * trace / length * np.eye(length)
    w = mv_weights(CovarianceSnapshot(R, length, eps)).weights
    return float(np.mean(sliding_window_view(y[:, n], length) @ w))


def _spot_check(method: str, frame: DelayedFrame, beamform: BeamformConfig, workers: int) -> None:
    """Recompute the central pixel of the rf image from first principles."""
    cfg = BeamformConfig(**{**beamform.to_dict(), 'method': method, 'workers': workers})
    rf = beamform_rf(frame, cfg)
    k, n = frame.config.num_scanlines // 2, frame.config.samples_per_line // 2
    y = frame.centered()[k]
    if method == 'das':
        expected = float(apodization(cfg.window, y.shape[0]) @ y[:, n])
    else:
        length = cfg.subarray or default_subarray(y.shape[0])
        eps = default_loading(length) if cfg.epsilon is None else cfg.epsilon
        expected = _mv_pixel(y, n, length, eps, cfg.temporal_avg)
    if not np.isclose(rf[n, k], expected, rtol=1e-6, atol=1e-9):
        msg = f'{method} output failed its correctness check on frame 0 ({rf[n, k]:g} != {expected:g})'
        raise NumericalError(msg)


def _gate(
    method: str, frame: DelayedFrame, image: np.ndarray, beamform: BeamformConfig, workers: int, net: FCNN | None
) -> None:
    expected = (frame.config.samples_per_line, frame.config.num_scanlines)
    if image.shape != expected:
        msg = f'{method} produced shape {image.shape}, expected {expected}'
        raise NumericalError(msg)
    if not (np.all(np.isfinite(image)) and image.min() >= 0 and image.max() <= 1):
        msg = f'{method} produced values outside [0,1] on frame 0'
        raise NumericalError(msg)
    if method == 'net':
        reference = forward(net, frame)
        if not np.allclose(image, reference, atol=NET_ATOL, rtol=0):
            err = float(np.abs(image - reference).max())
            msg = f'net output failed its correctness check on frame 0 (max deviation {err:g})'
            raise NumericalError(msg)
        return
    _spot_check(method, frame, beamform, workers)


def run_bench(
    frames: Sequence[DelayedFrame],
    methods: Iterable[str] = ('das', 'mv'),
    workers: int = 1,
    *,
    net: FCNN | None = None,
    beamform: BeamformConfig | None = None,
    progress: bool = True,
) -> list[BenchReport]:
    """Time every method over all frames after ``WARMUP_FRAMES`` untimed frames.

    The timed stage runs from the delayed frame to the [0,1] display image; the network runs through
    an :class:`InferencePlan`. Each method's output on frame 0 is validated before timing starts.
    """
    methods = list(methods)
    unknown = set(methods) - set(BENCH_METHODS)
    if unknown:
        msg = f'Unknown bench methods: {sorted(unknown)}'
        raise DataError(msg)
    if len(frames) < MIN_FRAMES:
        msg = f'Benchmark needs at least {MIN_FRAMES} frames, got {len(frames)}'
        raise DataError(msg)
    shape = frames[0].data.shape
    if any(f.data.shape != shape for f in frames):
        msg = 'All benchmark frames must share one shape'
        raise DataError(msg)
    beamform = beamform or BeamformConfig()
    timings: dict[str, list[float]] = {}
    for method in methods:
        fn = _reconstructor(method, workers, net, beamform)
        _gate(method, frames[0], fn(frames[0]), beamform, workers, net)
        for frame in frames[:WARMUP_FRAMES]:
            fn(frame)
        samples = []
        for frame in tqdm(frames, desc=method, unit='frame', disable=not progress):
            start = time.perf_counter()
            fn(frame)
            samples.append((time.perf_counter() - start) * 1e3)
        timings[method] = samples
        log.info('[bench] %s: mean %.2f ms over %d frames', method, statistics.fmean(samples), len(samples))

    mv_fps = 1e3 / statistics.fmean(timings['mv']) if 'mv' in timings else None
    reports = []
    for method, samples in timings.items():
        mean_ms = statistics.fmean(samples)
        fps = 1e3 / mean_ms
        reports.append(
            BenchReport(
                method=method,
                frames=len(samples),
                mean_ms=mean_ms,
                p50_ms=percentile(samples, 0.50),
                p95_ms=percentile(samples, 0.95),
                fps=fps,
                workers=workers,
                input_shape=shape,
                speedup_vs_mv=speedup(fps, mv_fps) if mv_fps else None,
            )
        )
    return reports


def speedup(fps_method: float, fps_mv: float) -> float:
    if fps_mv <= 0:
        msg = 'MV frame rate must be > 0'
        raise NumericalError(msg)
    return fps_method / fps_mv


def write_bench_csv(path: Path, reports: Sequence[BenchReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as fh:
        writer = csv.DictWriter(fh, fieldnames=list(BenchReport.__dataclass_fields__))
        writer.writeheader()
        for report in reports:
            row = report.to_dict()
            row['input_shape'] = 'x'.join(map(str, report.input_shape))
            writer.writerow(row)
    log.info('Saved: %s', path)

"""Receive beamforming of DelayedFrames: delay-and-sum and minimum variance (Capon).

Both beamformers work on re-centered samples ``y - 0.5`` and produce rf images laid out as
``[samples, scanlines]``; ``envelope_log_compress`` turns rf into the displayable [0,1] image.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg
from scipy.signal import get_window, hilbert

from .errors import DataError, NumericalError, SingularCovarianceError
from .sim import DelayedFrame

log = logging.getLogger(__name__)

WINDOWS = ('boxcar', 'hann', 'hamming')
METHODS = ('das', 'mv')

CovarianceFn = Callable[[np.ndarray, int, float], 'CovarianceSnapshot']


@dataclass(frozen=True)
class ApodizationWeights:
    weights: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.weights)):
            msg = 'Apodization weights must be finite'
            raise NumericalError(msg)


@dataclass(frozen=True)
class CovarianceSnapshot:
    """Loaded spatial covariance estimate R_k of one pixel (``subarray_length`` square)."""

    matrix: np.ndarray
    subarray_length: int
    diagonal_loading: float = 0.0

    def __post_init__(self) -> None:
        shape = (self.subarray_length, self.subarray_length)
        if self.matrix.shape != shape:
            msg = f'Covariance shape {self.matrix.shape} does not match subarray length {self.subarray_length}'
            raise DataError(msg)
        if not np.allclose(self.matrix, self.matrix.T, rtol=1e-12, atol=1e-14):
            msg = 'Covariance matrix must be symmetric'
            raise DataError(msg)


@dataclass(frozen=True)
class SteeringVector:
    a: np.ndarray

    @classmethod
    def ones(cls, length: int) -> SteeringVector:
        """Array response of delay-aligned data."""
        return cls(np.ones(length))


@dataclass(frozen=True)
class ReconImage:
    """Beamformed rf ``[samples, scanlines]`` and its log-compressed display image."""

    rf: np.ndarray
    display: np.ndarray
    dynamic_range_db: float

    def __post_init__(self) -> None:
        if self.rf.shape != self.display.shape:
            msg = f'rf shape {self.rf.shape} and display shape {self.display.shape} differ'
            raise DataError(msg)
        if self.display.size and (self.display.min() < 0 or self.display.max() > 1):
            msg = 'Display image must lie in [0,1]'
            raise DataError(msg)


@dataclass(frozen=True)
class BeamformConfig:
    method: str = 'das'
    window: str = 'boxcar'
    subarray: int | None = None
    epsilon: float | None = None
    temporal_avg: int = 0
    dynamic_range_db: float = 60.0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            msg = f'Unknown beamforming method: {self.method!r}'
            raise DataError(msg)
        if self.window not in WINDOWS:
            msg = f'Unknown apodization window: {self.window!r}'
            raise DataError(msg)
        if self.temporal_avg < 0 or self.workers < 1:
            msg = 'temporal_avg must be >= 0 and workers >= 1'
            raise DataError(msg)
        if self.dynamic_range_db <= 0:
            msg = f'dynamic_range_db must be > 0, got {self.dynamic_range_db}'
            raise DataError(msg)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BeamformConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            msg = f'Unknown BeamformConfig keys: {sorted(unknown)}'
            raise DataError(msg)
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def default_subarray(num_elements: int) -> int:
    return max(1, num_elements // 2)


def default_loading(subarray_length: int) -> float:
    return 1.0 / (10 * subarray_length)


def apodization(window: str, length: int) -> np.ndarray:
    """Symmetric window normalized to unit sum."""
    if window not in WINDOWS:
        msg = f'Unknown apodization window: {window!r}'
        raise DataError(msg)
    w = get_window(window, length, fftbins=False).astype(np.float64)
    return w / w.sum()


def map_scanlines(fn: Callable[[int], np.ndarray], num_scanlines: int, workers: int = 1) -> np.ndarray:
    """Evaluate ``fn(k)`` for every scanline and stack the columns into ``[samples, scanlines]``.

    Columns are written independently, so the result does not depend on ``workers``.
    """
    if workers <= 1:
        columns = [fn(k) for k in range(num_scanlines)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            columns = list(pool.map(fn, range(num_scanlines)))
    return np.stack(columns, axis=1)


def das(frame: DelayedFrame, window: str = 'boxcar', *, workers: int = 1) -> np.ndarray:
    """Delay-and-sum: ``rf[n, k] = w^T (y_k(n) - 0.5)``."""
    w = apodization(window, frame.config.num_elements)
    y = frame.centered()
    return map_scanlines(lambda k: w @ y[k], frame.config.num_scanlines, workers)


def estimate_covariance(snapshot: np.ndarray, subarray_length: int, epsilon: float = 0.0) -> CovarianceSnapshot:
    """Spatially smoothed covariance of one snapshot plus ``epsilon * trace(R)/L`` diagonal loading."""
    y = np.asarray(snapshot, dtype=np.float64)
    length = subarray_length
    if not 1 <= length <= y.shape[0]:
        msg = f'Subarray length {length} outside [1, {y.shape[0]}]'
        raise DataError(msg)
    if epsilon < 0:
        msg = f'Diagonal loading must be >= 0, got {epsilon}'
        raise DataError(msg)
    subs = sliding_window_view(y, length)
    R = subs.T @ subs / subs.shape[0]
    R += epsilon * np.trace(R) / length * np.eye(length)
    return CovarianceSnapshot(R, length, epsilon)


def mv_weights(R: CovarianceSnapshot, a: SteeringVector | None = None) -> ApodizationWeights:
    """Capon weights ``R^-1 a / (a^T R^-1 a)``: minimum ``w^T R w`` subject to ``w^T a = 1``."""
    a = a or SteeringVector.ones(R.subarray_length)
    try:
        factor = linalg.cho_factor(R.matrix)
    except linalg.LinAlgError as e:
        msg = f'Covariance is not positive definite (loading {R.diagonal_loading:g} insufficient)'
        raise SingularCovarianceError(msg) from e
    ria = linalg.cho_solve(factor, a.a)
    denom = a.a @ ria
    if not (np.isfinite(denom) and denom > 0):
        msg = 'Degenerate covariance: a^T R^-1 a is not positive'
        raise SingularCovarianceError(msg)
    return ApodizationWeights(ria / denom)


def sinr(omega: ApodizationWeights, R: CovarianceSnapshot, a: SteeringVector, signal_power: float) -> float:
    """Signal-to-interference-plus-noise ratio of a weight vector (diagnostic)."""
    w = omega.weights
    denom = float(w @ R.matrix @ w)
    if denom <= 0:
        msg = 'SINR undefined: w^T R w must be > 0'
        raise NumericalError(msg)
    return signal_power * float(w @ a.a) ** 2 / denom


def _temporal_average(R: np.ndarray, half_window: int) -> np.ndarray:
    """Mean of the per-sample estimates over ``[n - T, n + T]`` clipped to the scanline."""
    if half_window == 0:
        return R
    n = R.shape[0]
    csum = np.concatenate([np.zeros((1, *R.shape[1:])), np.cumsum(R, axis=0)])
    lo = np.clip(np.arange(n) - half_window, 0, n)
    hi = np.clip(np.arange(n) + half_window + 1, 0, n)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None, None]


def _mv_scanline(
    y: np.ndarray,
    length: int,
    epsilon: float,
    temporal_avg: int,
    covariance_fn: CovarianceFn | None,
) -> np.ndarray:
    """MV output for one scanline ``y`` of shape ``(M, N)``."""
    snaps = y.T
    subs = sliding_window_view(snaps, length, axis=1)  # (N, P, L)
    n_subs = subs.shape[1]
    eye = np.eye(length)
    if covariance_fn is None:
        R = np.einsum('npi,npj->nij', subs, subs) / n_subs
        R = _temporal_average(R, temporal_avg)
        trace = np.trace(R, axis1=1, axis2=2)
        R = R + (epsilon * trace / length)[:, None, None] * eye
    else:
        R = np.stack([covariance_fn(s, length, epsilon).matrix for s in snaps])
        trace = np.trace(R, axis1=1, axis2=2)
    # silent pixels: uniform weights, output 0
    silent = trace == 0
    R[silent] = eye
    try:
        ria = np.linalg.solve(R, np.ones((R.shape[0], length, 1)))[..., 0]
    except np.linalg.LinAlgError as e:
        msg = f'Singular covariance in MV solve (loading {epsilon:g} insufficient)'
        raise SingularCovarianceError(msg) from e
    denom = ria.sum(axis=1)
    if not np.all(np.isfinite(denom) & (denom > 0)):
        msg = f'Covariance not positive definite in MV solve (loading {epsilon:g} insufficient)'
        raise SingularCovarianceError(msg)
    w = ria / denom[:, None]
    return np.einsum('npl,nl->n', subs, w) / n_subs


def mv_beamform(
    frame: DelayedFrame,
    subarray_length: int | None = None,
    epsilon: float | None = None,
    temporal_avg: int = 0,
    *,
    covariance_fn: CovarianceFn | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Minimum variance beamforming, one constrained solve per pixel.

    Per pixel the spatially smoothed covariance (optionally averaged over ``±temporal_avg`` samples)
    is loaded, the Capon weights solved, and the output is the subarray mean of ``w^T y_p``.
    ``covariance_fn`` replaces the built-in estimator (temporal averaging then does not apply).
    """
    n_el = frame.config.num_elements
    length = subarray_length or default_subarray(n_el)
    if not 1 <= length <= n_el:
        msg = f'Subarray length {length} outside [1, {n_el}]'
        raise DataError(msg)
    eps = default_loading(length) if epsilon is None else epsilon
    if eps < 0 or temporal_avg < 0:
        msg = 'epsilon and temporal_avg must be >= 0'
        raise DataError(msg)
    log.debug('[mv] L=%d eps=%g T=%d workers=%d', length, eps, temporal_avg, workers)
    y = frame.centered()
    return map_scanlines(
        lambda k: _mv_scanline(y[k], length, eps, temporal_avg, covariance_fn),
        frame.config.num_scanlines,
        workers,
    )


def envelope(rf: np.ndarray) -> np.ndarray:
    """Magnitude of the analytic signal of every scanline (column)."""
    return np.abs(hilbert(rf, axis=0))


def envelope_log_compress(rf: np.ndarray, dynamic_range_db: float = 60.0) -> np.ndarray:
    """Envelope detection and log compression into a [0,1] display image."""
    if dynamic_range_db <= 0:
        msg = f'dynamic_range_db must be > 0, got {dynamic_range_db}'
        raise DataError(msg)
    env = envelope(rf)
    peak = env.max(initial=0.0)
    if peak == 0:
        return np.zeros_like(env)
    with np.errstate(divide='ignore'):
        db = 20 * np.log10(env / peak)
    return np.clip(1 + db / dynamic_range_db, 0.0, 1.0)


def beamform_rf(frame: DelayedFrame, cfg: BeamformConfig) -> np.ndarray:
    if cfg.method == 'das':
        return das(frame, cfg.window, workers=cfg.workers)
    return mv_beamform(frame, cfg.subarray, cfg.epsilon, cfg.temporal_avg, workers=cfg.workers)


def reconstruct(frame: DelayedFrame, cfg: BeamformConfig | None = None) -> ReconImage:
    """Beamform and log-compress a frame (the reconstruction stage benchmarked against the network)."""
    cfg = cfg or BeamformConfig()
    rf = beamform_rf(frame, cfg)
    return ReconImage(rf, envelope_log_compress(rf, cfg.dynamic_range_db), cfg.dynamic_range_db)

"""Synthetic channel data for linear scanline imaging.

Point-scatterer phantoms are turned into per-element pulse-echo traces (RawFrame, int16) and then
dynamically receive-focused and normalized into DelayedFrames, the input of every reconstruction
method in this package.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError
from .utils import load_json

log = logging.getLogger(__name__)

INT16_FULL_SCALE = 65536.0
_CHUNK = 1024  # scatterers per vectorized block


def _reject_unknown(cls, data: Mapping[str, Any]) -> None:
    if not isinstance(data, Mapping):
        msg = f'{cls.__name__} must be a JSON object, got {type(data).__name__}'
        raise DataError(msg)
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        msg = f'Unknown {cls.__name__} keys: {sorted(unknown)}'
        raise DataError(msg)


@dataclass(frozen=True)
class TransducerConfig:
    """Array geometry, sampling and medium of a linear scanline acquisition.

    Scanline ``k`` has its axis at ``x_k = (k - (K-1)/2) * scanline_spacing`` and is received on an
    ``num_elements`` aperture centred on that axis.
    """

    num_elements: int = 64
    pitch: float = 0.3e-3
    center_frequency: float = 5e6
    sampling_rate: float = 40e6
    speed_of_sound: float = 1540.0
    num_scanlines: int = 64
    samples_per_line: int = 2048
    pulse_cycles: int = 2
    scanline_spacing: float | None = None
    gain: float = 10.0

    def __post_init__(self) -> None:
        if self.scanline_spacing is None:
            object.__setattr__(self, 'scanline_spacing', self.pitch)
        if self.num_elements < 2:
            msg = f'num_elements must be >= 2, got {self.num_elements}'
            raise DataError(msg)
        positive = (
            'pitch',
            'center_frequency',
            'sampling_rate',
            'speed_of_sound',
            'num_scanlines',
            'samples_per_line',
            'pulse_cycles',
            'scanline_spacing',
            'gain',
        )
        for name in positive:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                msg = f'{name} must be a positive finite number, got {value}'
                raise DataError(msg)
        if self.sampling_rate < 4 * self.center_frequency:
            msg = f'sampling_rate {self.sampling_rate:g} Hz below 4 x center_frequency {self.center_frequency:g} Hz'
            raise DataError(msg)

    @classmethod
    def desk(cls, **overrides) -> TransducerConfig:
        """Small acquisition the network trains on in minutes on a CPU."""
        params = {
            'num_elements': 32,
            'pitch': 0.3e-3,
            'center_frequency': 2.5e6,
            'sampling_rate': 10e6,
            'num_scanlines': 32,
            'samples_per_line': 128,
            'scanline_spacing': 0.15e-3,
        }
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TransducerConfig:
        _reject_unknown(cls, data)
        try:
            return cls(**data)
        except TypeError as e:
            msg = f'Invalid TransducerConfig: {e}'
            raise DataError(msg) from e

    @classmethod
    def from_json(cls, path: Path | str) -> TransducerConfig:
        return cls.from_dict(load_json(path))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.num_scanlines, self.num_elements, self.samples_per_line)

    @property
    def wavelength(self) -> float:
        return self.speed_of_sound / self.center_frequency

    @property
    def depth_spacing(self) -> float:
        """Axial distance between consecutive samples, c / (2 f_s)."""
        return self.speed_of_sound / (2 * self.sampling_rate)

    @property
    def sample_depths(self) -> np.ndarray:
        return np.arange(self.samples_per_line) * self.depth_spacing

    @property
    def scanline_positions(self) -> np.ndarray:
        k = np.arange(self.num_scanlines)
        return (k - (self.num_scanlines - 1) / 2) * self.scanline_spacing

    @property
    def element_offsets(self) -> np.ndarray:
        """Lateral element positions relative to the scanline axis."""
        i = np.arange(self.num_elements)
        return (i - (self.num_elements - 1) / 2) * self.pitch

    @property
    def max_depth(self) -> float:
        return (self.samples_per_line - 1) * self.depth_spacing

    @property
    def pulse_sigma(self) -> float:
        """Std-dev (s) of the Gaussian envelope whose -6 dB width spans ``pulse_cycles`` periods."""
        return self.pulse_cycles / (self.center_frequency * 2 * math.sqrt(2 * math.log(2)))


@dataclass(frozen=True)
class PhantomRegion:
    """A rectangle or circle filled with random scatterers.

    ``bounds`` is ``(x0, x1, z0, z1)`` for rectangles and ``(cx, cz, radius)`` for circles, in
    meters. A region with zero density is anechoic: it removes every scatterer placed before it
    (explicit scatterers and earlier regions) that falls inside it.
    """

    shape: str
    bounds: tuple[float, ...]
    density: float = 0.0
    mean: float = 0.0
    spread: float = 1.0

    def __post_init__(self) -> None:
        expected = {'rect': 4, 'circle': 3}
        if self.shape not in expected:
            msg = f'Unknown region shape: {self.shape!r}'
            raise DataError(msg)
        if len(self.bounds) != expected[self.shape]:
            msg = f'{self.shape} region needs {expected[self.shape]} bounds, got {len(self.bounds)}'
            raise DataError(msg)
        if self.density < 0 or self.spread < 0:
            msg = 'Region density and spread must be >= 0'
            raise DataError(msg)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PhantomRegion:
        if not isinstance(data, Mapping):
            msg = f'Phantom region must be a JSON object, got {type(data).__name__}'
            raise DataError(msg)
        data = dict(data)
        shape = data.pop('shape', None)
        if shape not in ('rect', 'circle'):
            msg = f'Unknown region shape: {shape!r}'
            raise DataError(msg)
        try:
            if shape == 'rect':
                bounds = (*data.pop('x'), *data.pop('z'))
            else:
                bounds = (*data.pop('center'), data.pop('radius'))
            bounds = tuple(float(b) for b in bounds)
            unknown = set(data) - {'density', 'mean', 'spread'}
            if unknown:
                msg = f'Unknown PhantomRegion keys: {sorted(unknown)}'
                raise DataError(msg)
            params = {name: float(value) for name, value in data.items()}
        except KeyError as e:
            msg = f'{shape} region missing key: {e}'
            raise DataError(msg) from e
        except DataError:
            raise
        except (TypeError, ValueError) as e:
            msg = f'{shape} region has a non-numeric value: {e}'
            raise DataError(msg) from e
        return cls(shape=shape, bounds=bounds, **params)

    def to_dict(self) -> dict[str, Any]:
        if self.shape == 'rect':
            geometry = {'x': list(self.bounds[:2]), 'z': list(self.bounds[2:])}
        else:
            geometry = {'center': list(self.bounds[:2]), 'radius': self.bounds[2]}
        return {'shape': self.shape, **geometry, 'density': self.density, 'mean': self.mean, 'spread': self.spread}

    @property
    def area(self) -> float:
        if self.shape == 'rect':
            x0, x1, z0, z1 = self.bounds
            return abs(x1 - x0) * abs(z1 - z0)
        return math.pi * self.bounds[2] ** 2

    def contains(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        if self.shape == 'rect':
            x0, x1, z0, z1 = self.bounds
            return (x >= min(x0, x1)) & (x <= max(x0, x1)) & (z >= min(z0, z1)) & (z <= max(z0, z1))
        cx, cz, radius = self.bounds
        return (x - cx) ** 2 + (z - cz) ** 2 <= radius**2

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        count = round(self.density * self.area)
        if self.shape == 'rect':
            x0, x1, z0, z1 = self.bounds
            x = rng.uniform(min(x0, x1), max(x0, x1), count)
            z = rng.uniform(min(z0, z1), max(z0, z1), count)
        else:
            cx, cz, radius = self.bounds
            r = radius * np.sqrt(rng.uniform(0.0, 1.0, count))
            theta = rng.uniform(0.0, 2 * np.pi, count)
            x = cx + r * np.cos(theta)
            z = cz + r * np.sin(theta)
        a = rng.normal(self.mean, self.spread, count)
        return np.column_stack([x, z, a])


@dataclass(frozen=True)
class Phantom:
    """Point scatterers ``(x, z, amplitude)`` plus regions expanded by a seeded generator."""

    scatterers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    regions: tuple[PhantomRegion, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.scatterers, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            msg = 'Phantom scatterers must be finite'
            raise DataError(msg)
        if np.any(pts[:, 1] <= 0):
            msg = 'Phantom scatterer depths must be > 0'
            raise DataError(msg)
        object.__setattr__(self, 'scatterers', pts)
        object.__setattr__(self, 'regions', tuple(self.regions))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Phantom:
        if not isinstance(data, Mapping):
            msg = f'Phantom must be a JSON object, got {type(data).__name__}'
            raise DataError(msg)
        data = dict(data)
        regions = data.pop('regions', [])
        if not isinstance(regions, list):
            msg = 'Phantom regions must be a list'
            raise DataError(msg)
        regions = tuple(PhantomRegion.from_dict(r) for r in regions)
        try:
            scatterers = np.asarray(data.pop('scatterers', []), dtype=np.float64).reshape(-1, 3)
            seed = int(data.pop('seed', 0))
        except (TypeError, ValueError) as e:
            msg = f'Phantom scatterers must be [x, z, amplitude] triples and seed an integer: {e}'
            raise DataError(msg) from e
        if data:
            msg = f'Unknown Phantom keys: {sorted(data)}'
            raise DataError(msg)
        return cls(scatterers=scatterers, regions=regions, seed=seed)

    @classmethod
    def from_json(cls, path: Path | str) -> Phantom:
        return cls.from_dict(load_json(path))

    def to_dict(self) -> dict[str, Any]:
        return {
            'scatterers': self.scatterers.tolist(),
            'regions': [r.to_dict() for r in self.regions],
            'seed': self.seed,
        }

    def merge(self, other: Phantom) -> Phantom:
        return Phantom(
            scatterers=np.concatenate([self.scatterers, other.scatterers]),
            regions=self.regions + other.regions,
            seed=self.seed,
        )

    def expand(self, seed: int | None = None) -> np.ndarray:
        """All scatterers as an ``(S, 3)`` array, regions drawn with ``seed`` (default: own seed)."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        points = self.scatterers
        for region in self.regions:
            if region.density == 0:
                points = points[~region.contains(points[:, 0], points[:, 1])]
            else:
                points = np.concatenate([points, region.sample(rng)])
        return points[points[:, 1] > 0]


def wire_phantom(depth: float, x: float = 0.0, amplitude: float = 1.0) -> Phantom:
    """A single point target (wire cross-section)."""
    return Phantom(scatterers=np.array([[x, depth, amplitude]]))


def cyst_phantom(
    config: TransducerConfig,
    center: tuple[float, float],
    radius: float,
    *,
    density: float = 2e7,
    seed: int = 0,
) -> Phantom:
    """Speckle background over the imaged field with an anechoic circular cyst carved out."""
    half_width = (config.scanline_positions[-1] - config.scanline_positions[0]) / 2 + config.element_offsets[-1]
    background = PhantomRegion(
        'rect',
        (-half_width, half_width, 0.1 * config.max_depth, 0.95 * config.max_depth),
        density=density,
    )
    cyst = PhantomRegion('circle', (center[0], center[1], radius))
    return Phantom(regions=(background, cyst), seed=seed)


def random_phantom(rng: np.random.Generator, config: TransducerConfig, *, density: float = 2e7) -> Phantom:
    """Speckle with a few bright wires and anechoic cysts; the training-set generator."""
    x_lo, x_hi = config.scanline_positions[0], config.scanline_positions[-1]
    z_lo, z_hi = 0.25 * config.max_depth, 0.9 * config.max_depth
    half_width = (x_hi - x_lo) / 2 + config.element_offsets[-1]
    bounds = (-half_width, half_width, 0.2 * config.max_depth, 0.95 * config.max_depth)
    regions = [PhantomRegion('rect', bounds, density)]
    for _ in range(rng.integers(0, 3)):
        radius = rng.uniform(2, 5) * config.wavelength
        regions.append(PhantomRegion('circle', (rng.uniform(x_lo, x_hi), rng.uniform(z_lo, z_hi), radius)))
    n_wires = int(rng.integers(1, 4))
    wires = np.column_stack([
        rng.uniform(x_lo, x_hi, n_wires),
        rng.uniform(z_lo, z_hi, n_wires),
        rng.uniform(5.0, 10.0, n_wires),
    ])
    return Phantom(scatterers=wires, regions=tuple(regions), seed=int(rng.integers(2**31)))


@dataclass(frozen=True)
class RawFrame:
    """int16 channel data ``[num_scanlines, num_elements, samples_per_line]``."""

    data: np.ndarray
    config: TransducerConfig

    def __post_init__(self) -> None:
        if self.data.shape != self.config.shape:
            msg = f'RawFrame shape {self.data.shape} does not match config {self.config.shape}'
            raise DataError(msg)
        if self.data.dtype != np.int16:
            msg = f'RawFrame must hold int16 samples, got {self.data.dtype}'
            raise DataError(msg)


@dataclass(frozen=True)
class DelayedFrame:
    """Receive-focused channel data y_k(n) normalized to [0,1], same layout as RawFrame."""

    data: np.ndarray
    config: TransducerConfig

    def __post_init__(self) -> None:
        if self.data.shape != self.config.shape:
            msg = f'DelayedFrame shape {self.data.shape} does not match config {self.config.shape}'
            raise DataError(msg)
        if not (np.all(np.isfinite(self.data)) and self.data.min(initial=0.5) >= 0 and self.data.max(initial=0.5) <= 1):
            msg = 'DelayedFrame values must lie in [0,1]'
            raise DataError(msg)

    def centered(self) -> np.ndarray:
        """Zero-mean float64 samples (normalization shifts silence to 0.5)."""
        return self.data.astype(np.float64) - 0.5


def excitation_pulse(t: np.ndarray, config: TransducerConfig) -> np.ndarray:
    """Gaussian-windowed sinusoid centred at ``t = 0``."""
    sigma = config.pulse_sigma
    return np.exp(-(t**2) / (2 * sigma**2)) * np.cos(2 * np.pi * config.center_frequency * t)


def simulate_rf(phantom: Phantom, config: TransducerConfig, seed: int | None = None) -> np.ndarray:
    """Float64 pulse-echo traces before quantization; linear in the phantom's scatterers."""
    points = phantom.expand(seed)
    n_lines, n_el, n_samples = config.shape
    traces = np.zeros(config.shape, dtype=np.float64)
    if len(points) == 0:
        return traces
    fs, c = config.sampling_rate, config.speed_of_sound
    half = math.ceil(4 * config.pulse_sigma * fs)
    taps = np.arange(-half, half + 2)
    log.debug('[simulate] %d scatterers, %d-tap pulse', len(points), len(taps))
    for k, x_k in enumerate(config.scanline_positions):
        elements = x_k + config.element_offsets
        for start in range(0, len(points), _CHUNK):
            xs, zs, amps = points[start : start + _CHUNK].T
            r_rx = np.hypot(xs[None, :] - elements[:, None], zs[None, :])  # (M, S)
            center = (zs[None, :] + r_rx) / c * fs
            idx = np.floor(center).astype(np.int64)[..., None] + taps  # (M, S, P)
            pulse = excitation_pulse((idx - center[..., None]) / fs, config)
            values = (amps[None, :] / r_rx)[..., None] * pulse
            inside = (idx >= 0) & (idx < n_samples)
            flat = (np.arange(n_el)[:, None, None] * n_samples + idx)[inside]
            traces[k] += np.bincount(flat, weights=values[inside], minlength=n_el * n_samples).reshape(n_el, n_samples)
    return traces


def quantize(traces: np.ndarray, config: TransducerConfig) -> np.ndarray:
    scaled = np.rint(traces * config.gain)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


def simulate_channel_data(phantom: Phantom, config: TransducerConfig, seed: int = 0) -> RawFrame:
    """Simulate one RawFrame: every element trace is the superposition of delayed, spread echoes.

    Transmit follows the scanline axis (delay z/c), receive goes scatterer -> element. Echoes that
    fall outside the sampled window are truncated.
    """
    log.info('[simulate] %d scanlines x %d elements x %d samples', *config.shape)
    return RawFrame(quantize(simulate_rf(phantom, config, seed), config), config)


def receive_delay_indices(config: TransducerConfig) -> np.ndarray:
    """Fractional raw-sample index read by element i at depth sample n, shape ``(M, N)``.

    The aperture is centred on each scanline, so the same table serves every scanline.
    """
    z = config.sample_depths
    r = np.hypot(config.element_offsets[:, None], z[None, :])
    return (z[None, :] + r) / config.speed_of_sound * config.sampling_rate


def normalize_int16(values: np.ndarray) -> np.ndarray:
    """Affine int16 -> [0,1] map keeping silence at 0.5."""
    return values / INT16_FULL_SCALE + 0.5


def apply_receive_delays(raw: RawFrame, config: TransducerConfig | None = None) -> DelayedFrame:
    """Dynamic receive focusing by linear interpolation, then int16 full scale mapped to [0,1]."""
    config = config or raw.config
    if raw.data.shape != config.shape:
        msg = f'Raw data shape {raw.data.shape} does not match config {config.shape}'
        raise DataError(msg)
    n_samples = config.samples_per_line
    idx = receive_delay_indices(config)
    lower = np.floor(idx).astype(np.int64)
    frac = idx - lower
    valid = (lower >= 0) & (lower <= n_samples - 1)
    lo = np.clip(lower, 0, n_samples - 1)
    hi = np.clip(lower + 1, 0, n_samples - 1)
    data = raw.data.astype(np.float64)
    a = np.take_along_axis(data, np.broadcast_to(lo, data.shape), axis=2)
    b = np.take_along_axis(data, np.broadcast_to(hi, data.shape), axis=2)
    # past the last sample the upper neighbour is outside the window and reads as silence
    b = np.where(lower + 1 <= n_samples - 1, b, 0.0)
    focused = np.where(valid, a * (1 - frac) + b * frac, 0.0)
    return DelayedFrame(normalize_int16(focused).astype(np.float32), config)


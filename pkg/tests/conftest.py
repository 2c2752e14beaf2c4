# Ensure the package in src/ is importable without installation
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src path to sys.path
ROOT = Path(__file__).resolve().parents[1]
src_path = ROOT / 'src'
if str(src_path) not in sys.path:
    sys.path.insert(0, str(src_path))

from learned_beamforming import autograd as ag  # noqa: E402
from learned_beamforming.network import NetworkConfig  # noqa: E402
from learned_beamforming.sim import (  # noqa: E402
    TransducerConfig,
    apply_receive_delays,
    simulate_channel_data,
    wire_phantom,
)


@pytest.fixture
def desk_config() -> TransducerConfig:
    return TransducerConfig.desk()


@pytest.fixture
def small_config() -> TransducerConfig:
    """8 elements, 8 scanlines, 64 samples: quick enough for per-test simulation."""
    return TransducerConfig.desk(num_elements=8, num_scanlines=8, samples_per_line=64)


@pytest.fixture
def wire_frame():
    """Delayed frame of a single wire on the central scanline axis at half depth (16-element desk grid)."""
    config = TransducerConfig.desk(num_elements=16)
    x = float(config.scanline_positions[config.num_scanlines // 2])
    raw = simulate_channel_data(wire_phantom(0.5 * config.max_depth, x), config, seed=0)
    return apply_receive_delays(raw)


@pytest.fixture
def tiny_network() -> NetworkConfig:
    return NetworkConfig(in_channels=8, base_channels=4, block_layers=1, seed=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def _numeric_grad(fn, arrays, index, eps=1e-6):
    base = arrays[index]
    grad = np.zeros_like(base)
    for pos in np.ndindex(base.shape):
        values = []
        for step in (eps, -eps):
            shifted = [a.copy() for a in arrays]
            shifted[index][pos] += step
            with ag.no_grad():
                values.append(fn(*[ag.tensor(a) for a in shifted]).item())
        grad[pos] = (values[0] - values[1]) / (2 * eps)
    return grad


@pytest.fixture
def check_gradients():
    """Compare backward() with central differences for every input, in float64."""

    def check(fn, *arrays, rtol=1e-5, atol=1e-7):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        with ag.precision('float64'):
            leaves = [ag.tensor(a, requires_grad=True) for a in arrays]
            fn(*leaves).backward()
            for i, leaf in enumerate(leaves):
                np.testing.assert_allclose(leaf.grad, _numeric_grad(fn, arrays, i), rtol=rtol, atol=atol)

    return check

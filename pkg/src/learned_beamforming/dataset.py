"""Simulated training sets: delayed frames paired with MV (target) and DAS (baseline) images.

On disk a dataset is a directory holding ``dataset.json`` (manifest), one ``frame_XXXX.usrf``
DelayedFrame container per sample and its ``frame_XXXX.target.usrb`` float32 target image.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from tqdm import tqdm

from .beamform import BeamformConfig, reconstruct
from .container import read_frame, read_rf, write_frame, write_rf
from .errors import DataError
from .sim import DelayedFrame, TransducerConfig, apply_receive_delays, random_phantom, simulate_channel_data
from .utils import load_json, save_json

log = logging.getLogger(__name__)

MANIFEST = 'dataset.json'
TARGETS = ('mv', 'das')


class Sample(NamedTuple):
    frame: DelayedFrame
    target: np.ndarray
    das: np.ndarray


def target_configs(workers: int = 1) -> dict[str, BeamformConfig]:
    return {'mv': BeamformConfig(method='mv', workers=workers), 'das': BeamformConfig(method='das', workers=workers)}


def make_sample(frame: DelayedFrame, configs: dict[str, BeamformConfig], targets: str = 'mv') -> Sample:
    das_image = reconstruct(frame, configs['das']).display
    target = das_image if targets == 'das' else reconstruct(frame, configs[targets]).display
    return Sample(frame, target, das_image)


def generate_dataset(
    n_frames: int,
    config: TransducerConfig | None = None,
    seed: int = 0,
    *,
    workers: int = 1,
    progress: bool = True,
) -> list[Sample]:
    """Simulate ``n_frames`` random phantoms; frame ``i`` depends only on ``(seed, i)``."""
    if n_frames < 1:
        msg = f'n_frames must be >= 1, got {n_frames}'
        raise DataError(msg)
    config = config or TransducerConfig.desk()
    configs = target_configs(workers)
    children = np.random.SeedSequence(seed).spawn(n_frames)
    log.info('[dataset] simulating %d frames of shape %s', n_frames, config.shape)
    samples = []
    for child in tqdm(children, desc='dataset', unit='frame', disable=not progress):
        phantom = random_phantom(np.random.default_rng(child), config)
        raw = simulate_channel_data(phantom, config, seed=phantom.seed)
        samples.append(make_sample(apply_receive_delays(raw), configs))
    return samples


def write_dataset(directory: Path, samples: list[Sample], metadata: dict[str, Any] | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        write_frame(directory / f'frame_{i:04d}.usrf', sample.frame, {'index': i, **(metadata or {})})
        write_rf(directory / f'frame_{i:04d}.target.usrb', sample.target, {'index': i, 'kind': 'mv-display'})
    save_json(
        directory / MANIFEST,
        {'frames': len(samples), 'config': samples[0].frame.config.to_dict() if samples else None, **(metadata or {})},
    )


def load_dataset(
    directory: Path | str, *, targets: str = 'mv', workers: int = 1, progress: bool = True
) -> list[Sample]:
    """Read every frame in ``directory``; MV targets come from the stored images when present."""
    if targets not in TARGETS:
        msg = f'Unknown target kind {targets!r}; choose from {", ".join(TARGETS)}'
        raise DataError(msg)
    directory = Path(directory)
    configs = target_configs(workers)
    samples = []
    for path, frame in tqdm(_frames(directory), desc='load', unit='frame', disable=not progress):
        stored = path.with_suffix('.target.usrb')
        if targets == 'mv' and stored.exists():
            target, _ = read_rf(stored)
            das_image = reconstruct(frame, configs['das']).display
            samples.append(Sample(frame, target.astype(np.float64), das_image))
        else:
            samples.append(make_sample(frame, configs, targets))
    log.info('[dataset] loaded %d frames from %s', len(samples), directory)
    return samples


def load_manifest(directory: Path | str) -> dict[str, Any]:
    return load_json(Path(directory) / MANIFEST)


def _frames(directory: Path) -> list[tuple[Path, DelayedFrame]]:
    paths = sorted(directory.glob('frame_*.usrf'))
    if not paths:
        msg = f'No frame_*.usrf files in {directory}'
        raise DataError(msg)
    frames = []
    for path in paths:
        frame, _ = read_frame(path)
        if not isinstance(frame, DelayedFrame):
            msg = f'{path} holds raw channel data; run the delay stage first'
            raise DataError(msg)
        frames.append((path, frame))
    return frames


def load_frames(directory: Path | str) -> list[DelayedFrame]:
    """Delayed frames of a dataset directory, without targets."""
    return [frame for _, frame in _frames(Path(directory))]

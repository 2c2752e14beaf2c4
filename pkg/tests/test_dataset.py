import numpy as np
import pytest

from learned_beamforming import dataset
from learned_beamforming.container import write_frame
from learned_beamforming.errors import DataError
from learned_beamforming.sim import Phantom, simulate_channel_data


@pytest.fixture
def samples(small_config):
    return dataset.generate_dataset(3, small_config, seed=5, progress=False)


def test_generated_samples(samples, small_config):
    assert len(samples) == 3
    image_shape = (small_config.samples_per_line, small_config.num_scanlines)
    for sample in samples:
        assert sample.frame.data.shape == small_config.shape
        assert sample.target.shape == image_shape
        assert sample.das.shape == image_shape
        assert 0 <= sample.target.min() and sample.target.max() <= 1
    assert not np.array_equal(samples[0].frame.data, samples[1].frame.data)


def test_frame_depends_only_on_seed_and_index(samples, small_config):
    shorter = dataset.generate_dataset(2, small_config, seed=5, progress=False)
    for a, b in zip(shorter, samples[:2], strict=True):
        np.testing.assert_array_equal(a.frame.data, b.frame.data)
        np.testing.assert_array_equal(a.target, b.target)
    other = dataset.generate_dataset(1, small_config, seed=6, progress=False)
    assert not np.array_equal(other[0].frame.data, samples[0].frame.data)


def test_write_and_load_dataset(tmp_path, samples, small_config):
    directory = tmp_path / 'set'
    dataset.write_dataset(directory, samples, {'seed': 5})
    assert sorted(p.name for p in directory.iterdir()) == [
        'dataset.json',
        'frame_0000.target.usrb',
        'frame_0000.usrf',
        'frame_0001.target.usrb',
        'frame_0001.usrf',
        'frame_0002.target.usrb',
        'frame_0002.usrf',
    ]
    manifest = dataset.load_manifest(directory)
    assert manifest['frames'] == 3
    assert manifest['seed'] == 5
    assert manifest['config'] == small_config.to_dict()

    loaded = dataset.load_dataset(directory, progress=False)
    for original, back in zip(samples, loaded, strict=True):
        np.testing.assert_array_equal(back.frame.data, original.frame.data)
        np.testing.assert_allclose(back.target, original.target, atol=1e-6)
        np.testing.assert_allclose(back.das, original.das, atol=1e-12)

    das_targets = dataset.load_dataset(directory, targets='das', progress=False)
    np.testing.assert_allclose(das_targets[0].target, das_targets[0].das)
    assert len(dataset.load_frames(directory)) == 3


def test_missing_stored_targets_are_recomputed(tmp_path, samples):
    directory = tmp_path / 'set'
    dataset.write_dataset(directory, samples)
    (directory / 'frame_0001.target.usrb').unlink()
    loaded = dataset.load_dataset(directory, progress=False)
    np.testing.assert_allclose(loaded[1].target, samples[1].target, atol=1e-6)


def test_dataset_errors(tmp_path, small_config):
    with pytest.raises(DataError):
        dataset.generate_dataset(0, small_config)
    with pytest.raises(DataError):
        dataset.load_frames(tmp_path)
    with pytest.raises(DataError):
        dataset.load_dataset(tmp_path, targets='net')

    raw = simulate_channel_data(Phantom(scatterers=[[0.0, 2e-3, 1.0]]), small_config)
    write_frame(tmp_path / 'frame_0000.usrf', raw)
    with pytest.raises(DataError, match='raw channel data'):
        dataset.load_dataset(tmp_path, progress=False)

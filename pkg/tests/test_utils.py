import logging
import math
from pathlib import Path

import numpy as np
import pytest

from learned_beamforming import utils
from learned_beamforming.errors import DataError


def test_utils_basic(tmp_path: Path):
    # is_frame_file / is_image_file detection (case-insensitive)
    assert utils.is_frame_file('scan.USRF') is True
    assert utils.is_frame_file('scan.pgm') is False
    assert utils.is_image_file('das.PGM') is True
    assert utils.is_image_file('das.usrb') is True
    assert utils.is_image_file('model.usnn') is False

    # require_ext success and failure
    utils.require_ext('model.usnn', utils.MODEL_EXTENSIONS, 'model')  # should not raise
    with pytest.raises(DataError, match='Unsupported model extension: .pt'):
        utils.require_ext('model.pt', utils.MODEL_EXTENSIONS, 'model')
    with pytest.raises(DataError, match=r'\(none\)'):
        utils.require_ext('model', utils.MODEL_EXTENSIONS, 'model')

    # save_text writes content, creating parents
    out_file = tmp_path / 'nested' / 'sample.txt'
    utils.save_text(out_file, 'hello world')
    assert out_file.read_text(encoding='utf-8') == 'hello world'


def test_json_helpers(tmp_path: Path):
    path = tmp_path / 'report.json'
    utils.save_json(path, {'psnr': math.inf, 'shape': np.array([2, 3]), 'value': np.float32(0.5), 'dir': tmp_path})
    loaded = utils.load_json(path)
    assert loaded == {'psnr': math.inf, 'shape': [2, 3], 'value': 0.5, 'dir': str(tmp_path)}

    with pytest.raises(DataError):
        utils.load_json(tmp_path / 'missing.json')
    broken = tmp_path / 'broken.json'
    broken.write_text('{"a": ', encoding='utf-8')
    with pytest.raises(DataError):
        utils.load_json(broken)
    with pytest.raises(TypeError):
        utils.dumps_json({'obj': object()})


def test_pgm_round_trip(tmp_path: Path, rng):
    image = rng.uniform(0, 1, (7, 5))
    path = tmp_path / 'image.pgm'
    utils.write_pgm(path, image, {'method': 'das', 'seed': 3})
    assert path.read_bytes().startswith(b'P5\n# {')
    back = utils.read_pgm(path)
    assert back.shape == (7, 5)
    assert np.max(np.abs(back - image)) <= 0.5 / 255 + 1e-12
    assert utils.read_pgm_metadata(path) == {'method': 'das', 'seed': 3}


def test_pgm_without_metadata(tmp_path: Path):
    path = tmp_path / 'plain.pgm'
    utils.write_pgm(path, np.array([[0.0, 1.0], [2.0, -1.0]]))
    np.testing.assert_array_equal(utils.read_pgm(path), [[0.0, 1.0], [1.0, 0.0]])
    assert utils.read_pgm_metadata(path) == {}


def test_pgm_rejects_bad_input(tmp_path: Path):
    with pytest.raises(DataError):
        utils.write_pgm(tmp_path / 'cube.pgm', np.zeros((2, 2, 2)))
    ascii_map = tmp_path / 'ascii.pgm'
    ascii_map.write_bytes(b'P2\n2 2\n255\n0 0 0 0\n')
    with pytest.raises(DataError):
        utils.read_pgm(ascii_map)
    truncated = tmp_path / 'short.pgm'
    truncated.write_bytes(b'P5\n4 4\n255\n' + bytes(3))
    with pytest.raises(DataError):
        utils.read_pgm(truncated)
    with pytest.raises(DataError):
        utils.read_pgm(tmp_path / 'missing.pgm')


def test_quantize_gray():
    values = np.array([-0.5, 0.0, 0.25, 1.0, 3.0])
    gray = utils.quantize_gray(values)
    assert gray.dtype == np.uint8
    np.testing.assert_array_equal(gray, [0, 0, 64, 255, 255])


@pytest.mark.parametrize(('verbosity', 'level'), [(-1, logging.WARNING), (0, logging.INFO), (1, logging.DEBUG)])
def test_configure_logging(verbosity, level):
    utils.configure_logging(verbosity)
    assert logging.getLogger().level == level

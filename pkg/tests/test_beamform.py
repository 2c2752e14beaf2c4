import numpy as np
import pytest

from learned_beamforming.beamform import (
    WINDOWS,
    ApodizationWeights,
    BeamformConfig,
    CovarianceSnapshot,
    SteeringVector,
    apodization,
    das,
    envelope,
    envelope_log_compress,
    estimate_covariance,
    mv_beamform,
    mv_weights,
    reconstruct,
    sinr,
)
from learned_beamforming.errors import DataError, NumericalError, SingularCovarianceError
from learned_beamforming.metrics import point_fwhm
from learned_beamforming.sim import (
    DelayedFrame,
    TransducerConfig,
    apply_receive_delays,
    simulate_channel_data,
    wire_phantom,
)


def _frame(config, values) -> DelayedFrame:
    return DelayedFrame(np.asarray(values, dtype=np.float32), config)


def _random_spd(rng, size):
    a = rng.normal(size=(size, size))
    return a @ a.T + 0.1 * np.eye(size)


@pytest.mark.parametrize('window', WINDOWS)
def test_apodization_sums_to_one(window):
    w = apodization(window, 16)
    assert w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(w, w[::-1])


def test_das_of_silence_is_zero(small_config):
    frame = _frame(small_config, np.full(small_config.shape, 0.5))
    rf = das(frame)
    assert rf.shape == (small_config.samples_per_line, small_config.num_scanlines)
    assert not rf.any()


def test_das_of_constant_offset(small_config):
    m = small_config.num_elements
    frame = _frame(small_config, np.full(small_config.shape, 0.5 + 1 / m))
    np.testing.assert_allclose(das(frame), 1 / m, rtol=1e-6)


def test_das_is_linear_in_centered_samples(small_config, rng):
    y = rng.uniform(0, 1, small_config.shape)
    scaled = 0.5 + 0.5 * (y - 0.5)
    np.testing.assert_allclose(
        das(_frame(small_config, scaled), 'hann'),
        0.5 * das(_frame(small_config, y), 'hann'),
        rtol=1e-5,
        atol=1e-7,
    )


def test_covariance_of_known_snapshot():
    R = estimate_covariance(np.array([1.0, 2.0, 3.0]), 2)
    np.testing.assert_allclose(R.matrix, [[2.5, 4.0], [4.0, 6.5]])

    flat = estimate_covariance(np.full(6, 0.3), 6)
    np.testing.assert_allclose(flat.matrix, np.full((6, 6), 0.09))


def test_loading_makes_covariance_positive_definite(rng):
    R = estimate_covariance(rng.normal(size=8), 4, 0.01)
    assert np.linalg.eigvalsh(R.matrix).min() > 0


@pytest.mark.parametrize(('length', 'epsilon'), [(0, 0.0), (4, 0.0), (2, -0.1)])
def test_covariance_rejects_bad_arguments(length, epsilon):
    with pytest.raises(DataError):
        estimate_covariance(np.ones(3), length, epsilon)


def test_covariance_snapshot_must_be_symmetric():
    with pytest.raises(DataError):
        CovarianceSnapshot(np.array([[1.0, 2.0], [0.0, 1.0]]), 2)


def test_mv_weights_closed_forms():
    uniform = mv_weights(CovarianceSnapshot(np.eye(4), 4))
    np.testing.assert_allclose(uniform.weights, 0.25)

    diag = mv_weights(CovarianceSnapshot(np.diag([1.0, 2.0, 4.0]), 3))
    np.testing.assert_allclose(diag.weights, [4 / 7, 2 / 7, 1 / 7])


@pytest.mark.parametrize('sizes', [(2, 7), (8, 9), (16, 17)])
def test_mv_weights_meet_unit_gain(rng, sizes):
    for _ in range(1000):
        length = int(rng.integers(*sizes))
        w = mv_weights(CovarianceSnapshot(_random_spd(rng, length), length)).weights
        assert abs(w.sum() - 1) < 1e-9


@pytest.mark.parametrize('length', [4, 8, 16])
def test_mv_weights_minimize_output_power(rng, length):
    for _ in range(1000):
        R = _random_spd(rng, length)
        w = mv_weights(CovarianceSnapshot(R, length)).weights
        best = w @ R @ w
        u = rng.normal(size=(100, length))
        feasible = w + (u - u.mean(axis=1, keepdims=True))
        powers = np.einsum('vi,ij,vj->v', feasible, R, feasible)
        assert np.all(powers >= best - 1e-9)


def test_mv_weights_reject_singular_covariance():
    with pytest.raises(SingularCovarianceError):
        mv_weights(estimate_covariance(np.array([1.0, 1.0, 1.0]), 2, 0.0))
    assert issubclass(SingularCovarianceError, NumericalError)


def test_sinr_of_uniform_weights():
    a = SteeringVector.ones(2)
    value = sinr(ApodizationWeights(np.array([0.5, 0.5])), CovarianceSnapshot(np.eye(2), 2), a, 1.0)
    assert value == pytest.approx(2.0)


def test_mv_weights_maximize_sinr(rng):
    a = SteeringVector.ones(5)
    R = CovarianceSnapshot(_random_spd(rng, 5), 5)
    best = sinr(mv_weights(R, a), R, a, 1.0)
    for _ in range(100):
        v = rng.normal(size=5)
        v = v / v.sum()
        assert sinr(ApodizationWeights(v), R, a, 1.0) <= best * (1 + 1e-9)
    assert sinr(mv_weights(R, a), R, a, 3.0) == pytest.approx(3 * best)


def test_sinr_needs_positive_output_power():
    R = CovarianceSnapshot(np.zeros((2, 2)), 2)
    with pytest.raises(NumericalError):
        sinr(ApodizationWeights(np.array([0.5, 0.5])), R, SteeringVector.ones(2), 1.0)


def test_mv_of_silence_is_zero(small_config):
    frame = _frame(small_config, np.full(small_config.shape, 0.5))
    assert not mv_beamform(frame).any()


def test_mv_with_identity_covariance_matches_das(small_config, rng):
    frame = _frame(small_config, rng.uniform(0.3, 0.7, small_config.shape))
    m = small_config.num_elements
    rf = mv_beamform(frame, m, covariance_fn=lambda snap, length, eps: CovarianceSnapshot(np.eye(length), length))
    np.testing.assert_allclose(rf, das(frame), atol=1e-6)


def test_mv_is_independent_of_worker_count(small_config, rng):
    frame = _frame(small_config, rng.uniform(0.3, 0.7, small_config.shape))
    serial = mv_beamform(frame, 4, 0.01, temporal_avg=1, workers=1)
    threaded = mv_beamform(frame, 4, 0.01, temporal_avg=1, workers=3)
    assert np.array_equal(serial, threaded)


@pytest.mark.parametrize(
    ('length', 'epsilon', 'temporal_avg'),
    [(-1, None, 0), (99, None, 0), (4, -1.0, 0), (4, None, -1)],
)
def test_mv_rejects_bad_parameters(small_config, length, epsilon, temporal_avg):
    frame = _frame(small_config, np.full(small_config.shape, 0.5))
    with pytest.raises(DataError):
        mv_beamform(frame, length, epsilon, temporal_avg)


def test_envelope_of_tone_is_flat():
    n = np.arange(512)
    rf = np.cos(2 * np.pi * n / 16)[:, None] * np.array([1.0, 3.0])
    env = envelope(rf)
    np.testing.assert_allclose(env[32:-32, 0], 1.0, rtol=0.05)
    np.testing.assert_allclose(env[32:-32, 1], 3.0, rtol=0.05)


def test_log_compression_maps_dynamic_range():
    n = np.arange(512)
    tone = np.cos(2 * np.pi * n / 16)
    rf = np.column_stack([tone, 1e-3 * tone])
    display = envelope_log_compress(rf, 60.0)
    assert display.max() == pytest.approx(1.0)
    np.testing.assert_allclose(display[:, 1], 0.0, atol=1e-6)
    assert display.min() >= 0


def test_log_compression_edge_cases():
    assert not envelope_log_compress(np.zeros((16, 4))).any()
    with pytest.raises(DataError):
        envelope_log_compress(np.ones((16, 4)), 0.0)


def test_hann_widens_lateral_response(wire_frame, desk_config):
    axial, lateral = desk_config.depth_spacing, desk_config.scanline_spacing
    _, boxcar = point_fwhm(envelope(das(wire_frame, 'boxcar')), axial, lateral)
    _, hann = point_fwhm(envelope(das(wire_frame, 'hann')), axial, lateral)
    assert hann >= 1.2 * boxcar


def test_mv_narrows_lateral_response(wire_frame, desk_config):
    axial, lateral = desk_config.depth_spacing, desk_config.scanline_spacing
    _, das_width = point_fwhm(envelope(das(wire_frame)), axial, lateral)
    _, mv_width = point_fwhm(envelope(mv_beamform(wire_frame)), axial, lateral)
    assert mv_width < das_width


@pytest.mark.parametrize('cfg', [BeamformConfig(), BeamformConfig(method='mv', temporal_avg=2, workers=2)])
def test_reconstruct_produces_display_image(wire_frame, desk_config, cfg):
    image = reconstruct(wire_frame, cfg)
    assert image.rf.shape == (desk_config.samples_per_line, desk_config.num_scanlines)
    assert image.display.shape == image.rf.shape
    assert image.display.max() == pytest.approx(1.0)
    assert image.display.min() >= 0


def test_beamform_config_validation():
    assert BeamformConfig.from_dict({'method': 'mv', 'subarray': 4}).to_dict()['subarray'] == 4
    with pytest.raises(DataError):
        BeamformConfig(method='fdmas')
    with pytest.raises(DataError):
        BeamformConfig(window='kaiser')
    with pytest.raises(DataError):
        BeamformConfig.from_dict({'mode': 'das'})


@pytest.mark.parametrize('method', ['das', 'mv'])
def test_beamformers_commute_with_shifts(small_config, rng, method):
    frame = _frame(small_config, rng.uniform(0, 1, small_config.shape))
    cfg = BeamformConfig(method=method)
    rf = reconstruct(frame, cfg).rf
    across = _frame(small_config, np.roll(frame.data, 3, axis=0))
    np.testing.assert_allclose(reconstruct(across, cfg).rf, np.roll(rf, 3, axis=1), rtol=1e-9, atol=1e-12)
    # per-sample estimates: a shift in depth only moves the output
    deeper = _frame(small_config, np.roll(frame.data, 5, axis=2))
    np.testing.assert_allclose(reconstruct(deeper, cfg).rf, np.roll(rf, 5, axis=0), rtol=1e-9, atol=1e-12)


@pytest.mark.slow
def test_mv_resolves_wire_at_depth():
    config = TransducerConfig(scanline_spacing=0.075e-3, num_scanlines=33, samples_per_line=1400)
    frame = apply_receive_delays(simulate_channel_data(wire_phantom(20e-3, 0.0), config, seed=0))
    spacing = (config.depth_spacing, config.scanline_spacing)
    das_axial, das_lateral = point_fwhm(envelope(das(frame)), *spacing)
    mv_axial, mv_lateral = point_fwhm(envelope(mv_beamform(frame, workers=4)), *spacing)
    assert mv_lateral <= 0.8 * das_lateral
    assert mv_axial == pytest.approx(das_axial, rel=0.15)

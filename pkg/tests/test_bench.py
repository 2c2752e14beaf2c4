import csv
from dataclasses import replace

import numpy as np
import pytest

from learned_beamforming import bench
from learned_beamforming.beamform import BeamformConfig
from learned_beamforming.errors import DataError, NumericalError
from learned_beamforming.network import FCNN, InferencePlan, NetworkConfig, forward
from learned_beamforming.sim import DelayedFrame, TransducerConfig


def _frames(config, count=10, seed=0):
    # latency does not depend on content, so random frames stand in for simulated ones
    rng = np.random.default_rng(seed)
    return [DelayedFrame(rng.uniform(0, 1, config.shape).astype(np.float32), config) for _ in range(count)]


def test_percentile_is_nearest_rank():
    values = [7.0, 1.0, 3.0, 9.0, 5.0, 2.0, 10.0, 4.0, 6.0, 8.0]
    assert bench.percentile(values, 0.5) == 5.0
    assert bench.percentile(values, 0.95) == 10.0
    assert bench.percentile([4.0], 0.95) == 4.0


def test_speedup():
    assert bench.speedup(17.0, 0.14) == pytest.approx(121.4, abs=0.1)
    with pytest.raises(NumericalError):
        bench.speedup(17.0, 0.0)


def test_run_bench_reports(small_config):
    reports = bench.run_bench(_frames(small_config), ('das', 'mv'), progress=False)
    assert [r.method for r in reports] == ['das', 'mv']
    for report in reports:
        assert report.frames == 10
        assert report.input_shape == small_config.shape
        assert report.fps == pytest.approx(1e3 / report.mean_ms)
        assert report.p50_ms <= report.p95_ms
    das, mv = reports
    assert mv.speedup_vs_mv == pytest.approx(1.0)
    assert das.speedup_vs_mv == pytest.approx(das.fps / mv.fps)


def test_run_bench_network(small_config, tiny_network):
    (report,) = bench.run_bench(_frames(small_config), ('net',), net=FCNN(tiny_network), progress=False)
    assert report.method == 'net'
    assert report.speedup_vs_mv is None


def test_run_bench_rejects_bad_input(small_config):
    frames = _frames(small_config)
    with pytest.raises(DataError, match='at least 10'):
        bench.run_bench(frames[:9], progress=False)
    with pytest.raises(DataError):
        bench.run_bench(frames, ('das', 'fft'), progress=False)
    with pytest.raises(DataError, match='needs a model'):
        bench.run_bench(frames, ('net',), progress=False)
    other = TransducerConfig.desk(num_elements=8, num_scanlines=4, samples_per_line=64)
    with pytest.raises(DataError, match='one shape'):
        bench.run_bench(frames[:9] + _frames(other, 1), progress=False)


def test_failed_correctness_check_stops_bench(small_config, monkeypatch):
    monkeypatch.setattr(bench, 'beamform_rf', lambda frame, cfg: np.zeros((64, 8)))
    with pytest.raises(NumericalError, match='correctness check'):
        bench.run_bench(_frames(small_config), ('das',), progress=False)


def test_write_bench_csv(tmp_path, small_config):
    reports = bench.run_bench(_frames(small_config), ('das', 'mv'), progress=False)
    path = tmp_path / 'bench' / 'latency.csv'
    bench.write_bench_csv(path, reports)
    with path.open(encoding='utf-8') as fh:
        rows = list(csv.DictReader(fh))
    assert [row['method'] for row in rows] == ['das', 'mv']
    assert rows[0]['input_shape'] == '8x8x64'
    assert float(rows[1]['speedup_vs_mv']) == pytest.approx(1.0)


def test_mv_check_covers_temporal_averaging(small_config, monkeypatch):
    cfg = BeamformConfig(method='mv', temporal_avg=2)
    bench.run_bench(_frames(small_config), ('mv',), beamform=cfg, progress=False)

    # averaging over the wrong window must be caught
    real = bench.beamform_rf
    monkeypatch.setattr(bench, 'beamform_rf', lambda frame, c: real(frame, replace(c, temporal_avg=0)))
    with pytest.raises(NumericalError, match='mv output failed'):
        bench.run_bench(_frames(small_config), ('mv',), beamform=cfg, progress=False)


def test_network_output_is_checked_against_graph(small_config, tiny_network, monkeypatch):
    net = FCNN(tiny_network)
    frame = _frames(small_config, 1)[0]
    image = InferencePlan(net)(frame)
    assert image.shape == (small_config.samples_per_line, small_config.num_scanlines)
    np.testing.assert_allclose(image, forward(net, frame), atol=bench.NET_ATOL)

    monkeypatch.setattr(InferencePlan, '__call__', lambda self, frame: np.full((64, 8), 0.5))
    with pytest.raises(NumericalError, match='net output failed'):
        bench.run_bench(_frames(small_config), ('net',), net=net, progress=False)


@pytest.mark.slow
def test_bench_latency_is_repeatable(desk_config):
    frames = _frames(desk_config)
    (first,), (second,) = (bench.run_bench(frames, ('mv',), progress=False) for _ in range(2))
    assert second.mean_ms == pytest.approx(first.mean_ms, rel=0.2)


@pytest.mark.slow
def test_network_outpaces_mv_tenfold_on_desk(desk_config):
    frames = _frames(desk_config, bench.MIN_FRAMES)
    net = FCNN(NetworkConfig(in_channels=desk_config.num_elements))
    reports = {r.method: r for r in bench.run_bench(frames, ('das', 'mv', 'net'), net=net, progress=False)}
    assert reports['net'].speedup_vs_mv >= 10
    assert reports['das'].speedup_vs_mv > 1

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, dataset, evaluation, training
from .beamform import METHODS, WINDOWS, BeamformConfig, reconstruct
from .container import read_frame, write_frame, write_rf
from .errors import EXIT_DATA, DataError, NumericalError, ReconstructionError, exit_code
from .losses import LOSS_NAMES
from .metrics import LossConfig, RegionSpec
from .network import NetworkConfig, forward, load_checkpoint, save_checkpoint
from .sim import DelayedFrame, Phantom, RawFrame, TransducerConfig, apply_receive_delays, simulate_channel_data
from .utils import (
    CONFIG_EXTENSIONS,
    FRAME_EXTENSIONS,
    MODEL_EXTENSIONS,
    configure_logging,
    dumps_json,
    load_json,
    require_ext,
    save_json,
    write_pgm,
)

log = logging.getLogger(__name__)


def _transducer(args) -> TransducerConfig:
    if getattr(args, 'config', None):
        require_ext(args.config, CONFIG_EXTENSIONS, 'config')
        return TransducerConfig.from_json(args.config)
    return TransducerConfig.desk() if getattr(args, 'desk', False) else TransducerConfig()


def _provenance(args) -> dict:
    """Every flag of the invocation, for artifact metadata."""
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != 'func'}


def _read_delayed(path: Path) -> tuple[DelayedFrame, dict]:
    require_ext(path, FRAME_EXTENSIONS, 'frame')
    frame, meta = read_frame(path)
    if not isinstance(frame, DelayedFrame):
        msg = f'{path} holds raw channel data; run the delay command first'
        raise DataError(msg)
    return frame, meta


def _beamform_config(args) -> BeamformConfig:
    return BeamformConfig(
        method=args.method,
        window=args.window,
        subarray=args.subarray,
        epsilon=args.epsilon,
        temporal_avg=args.temporal_avg,
        dynamic_range_db=args.dynrange,
        workers=args.workers,
    )


def _loss_config(args) -> LossConfig:
    return LossConfig(
        alpha=args.alpha,
        psnr_max=args.psnr_max,
        msssim_scales=args.msssim_scales,
        msssim_window=args.msssim_window,
    )


def _train_config(args) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        loss=_loss_config(args),
        folds=args.folds,
        loss_fn=args.loss,
    )


def _network_config(args) -> NetworkConfig:
    return NetworkConfig(base_channels=args.base_channels, block_layers=args.block_layers, seed=args.seed)


def cmd_simulate(args) -> None:
    config = _transducer(args)
    require_ext(args.phantom, CONFIG_EXTENSIONS, 'phantom')
    phantom = Phantom.from_json(args.phantom)
    raw = simulate_channel_data(phantom, config, seed=args.seed)
    write_frame(args.out, raw, {'seed': args.seed, 'args': _provenance(args)})


def cmd_delay(args) -> None:
    require_ext(args.inp, FRAME_EXTENSIONS, 'frame')
    raw, meta = read_frame(args.inp)
    if not isinstance(raw, RawFrame):
        msg = f'{args.inp} is already delayed'
        raise DataError(msg)
    delayed = apply_receive_delays(raw)
    write_frame(args.out, delayed, {**meta, 'stage': 'delayed', 'source': str(args.inp)})


def cmd_beamform(args) -> None:
    frame, meta = _read_delayed(args.inp)
    cfg = _beamform_config(args)
    image = reconstruct(frame, cfg)
    provenance = {
        'beamform': cfg.to_dict(),
        'dynamic_range_db': cfg.dynamic_range_db,
        'config': frame.config.to_dict(),
        'seed': meta.get('seed'),
        'args': _provenance(args),
    }
    write_pgm(args.out, image.display, provenance)
    if args.rf_out:
        write_rf(args.rf_out, image.rf, provenance)


def cmd_dataset(args) -> None:
    config = _transducer(args)
    samples = dataset.generate_dataset(args.frames, config, args.seed, workers=args.workers, progress=not args.quiet)
    dataset.write_dataset(args.out, samples, {'seed': args.seed, 'args': _provenance(args)})


def cmd_train(args) -> None:
    samples = dataset.load_dataset(args.data, targets=args.targets, progress=not args.quiet)
    cfg = _train_config(args)
    result = training.train(samples, cfg, network=_network_config(args), progress=not args.quiet)
    save_checkpoint(
        args.out,
        result.net,
        {
            'train': cfg.to_dict(),
            'held_out': result.held_out,
            'final_loss': result.curve[-1].loss,
            'args': _provenance(args),
        },
    )
    if args.curve:
        training.write_curve(args.curve, result.curve)


def cmd_infer(args) -> None:
    require_ext(args.model, MODEL_EXTENSIONS, 'model')
    net, _ = load_checkpoint(args.model)
    frame, meta = _read_delayed(args.inp)
    image = forward(net, frame)
    provenance = {'model': str(args.model), 'config': frame.config.to_dict(), 'seed': meta.get('seed')}
    write_pgm(args.out, image, {**provenance, 'args': _provenance(args)})


def cmd_evaluate(args) -> None:
    a = evaluation.load_image(args.a)
    records: list[dict] = []
    names = [m for m in args.metrics.split(',') if m]
    if names:
        if args.b is None:
            msg = 'Comparing images needs --b'
            raise DataError(msg)
        b = evaluation.load_image(args.b)
        records += evaluation.compare_images(a.display, b.display, names, _loss_config(args))
    if args.cnr:
        records.append(evaluation.cnr_record(a.display, RegionSpec.from_dict(load_json(args.cnr))))
    if args.fwhm:
        records += evaluation.fwhm_records(a.envelope, args.fwhm, a.axial_spacing, a.lateral_spacing)
    report = {'a': str(args.a), 'b': str(args.b) if args.b else None, 'records': records, 'args': _provenance(args)}
    _emit(report, args.out)


def cmd_bench(args) -> None:
    frames = dataset.load_frames(args.data)
    methods = [m for m in args.methods.split(',') if m]
    net = None
    if 'net' in methods:
        if args.model is None:
            msg = 'Benchmarking net needs --model'
            raise DataError(msg)
        require_ext(args.model, MODEL_EXTENSIONS, 'model')
        net, _ = load_checkpoint(args.model)
    reports = bench.run_bench(frames, methods, args.workers, net=net, progress=not args.quiet)
    _emit([r.to_dict() for r in reports], args.out)
    if args.csv:
        bench.write_bench_csv(args.csv, reports)


def cmd_table1(args) -> None:
    samples = dataset.load_dataset(args.data, targets=args.targets, progress=not args.quiet)
    report = training.loss_comparison_harness(
        samples, _train_config(args), network=_network_config(args), progress=not args.quiet
    )
    log.info('%s', training.format_loss_table(report))
    _emit(report, args.out)


def cmd_table2(args) -> None:
    config = _transducer(args)
    methods = [m for m in args.methods.split(',') if m]
    net = None
    if args.model:
        net, _ = load_checkpoint(args.model)
        methods = [*methods, 'net'] if 'net' not in methods else methods
    report = evaluation.phantom_quality(config, methods, net, seed=args.seed)
    _emit(report, args.out)


def pipeline(phantom_path: Path, config: TransducerConfig, seed: int, outdir: Path, *, workers: int = 1) -> dict:
    """Simulate a phantom, delay it, reconstruct with DAS and MV and compare both images.

    Writes raw.usrf, delayed.usrf, das/mv graymaps and rf images, and report.json into ``outdir``.
    """
    outdir.mkdir(parents=True, exist_ok=True)
    phantom = Phantom.from_json(phantom_path)
    # Step 1: simulate
    raw = simulate_channel_data(phantom, config, seed=seed)
    write_frame(outdir / 'raw.usrf', raw, {'seed': seed, 'phantom': str(phantom_path)})
    # Step 2: receive focusing
    delayed = apply_receive_delays(raw)
    write_frame(outdir / 'delayed.usrf', delayed, {'seed': seed, 'phantom': str(phantom_path)})
    # Step 3: beamform
    images = {}
    for method in METHODS:
        cfg = BeamformConfig(method=method, workers=workers)
        images[method] = reconstruct(delayed, cfg)
        provenance = {'beamform': cfg.to_dict(), 'dynamic_range_db': cfg.dynamic_range_db, 'config': config.to_dict()}
        write_pgm(outdir / f'{method}.pgm', images[method].display, provenance)
        write_rf(outdir / f'{method}.usrb', images[method].rf, provenance)
    # Step 4: evaluate
    names = ['psnr', 'mse']
    if min(images['das'].display.shape) >= LossConfig().msssim_window:
        names.insert(0, 'ssim')
    report = {
        'seed': seed,
        'config': config.to_dict(),
        'das_vs_mv': evaluation.compare_images(images['das'].display, images['mv'].display, names),
    }
    save_json(outdir / 'report.json', report)
    log.info('Workflow finished. Outputs are in: %s', outdir)
    return report


def cmd_pipeline(args) -> None:
    pipeline(args.phantom, _transducer(args), args.seed, args.outdir, workers=args.workers)


def _emit(report, out: Path | None) -> None:
    if out:
        save_json(out, report)
    else:
        print(dumps_json(report))


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--config', type=Path, default=None, help='TransducerConfig JSON (default: built-in)')
    p.add_argument('--desk', action='store_true', help='Use the small desk-scale transducer preset')


def _add_loss_flags(p: argparse.ArgumentParser, window: int = 11) -> None:
    p.add_argument('--alpha', type=float, default=0.75, help='MS-SSIM weight of the combined loss')
    p.add_argument('--psnr-max', type=float, default=50.0, dest='psnr_max')
    p.add_argument('--msssim-scales', type=int, default=3, dest='msssim_scales')
    p.add_argument('--msssim-window', type=int, default=window, dest='msssim_window')


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument('--data', type=Path, required=True, help='Dataset directory')
    p.add_argument('--targets', choices=dataset.TARGETS, default='mv')
    p.add_argument('--epochs', type=int, default=50)
    p.add_argument('--lr', type=float, default=1e-5)
    p.add_argument('--loss', choices=LOSS_NAMES, default='psnr-msssim')
    p.add_argument('--folds', type=int, default=5)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--batch-size', type=int, default=4, dest='batch_size')
    p.add_argument('--base-channels', type=int, default=4, dest='base_channels')
    p.add_argument('--block-layers', type=int, default=1, dest='block_layers')
    _add_loss_flags(p, window=7)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='learned_beamforming', description='Desk-scale ultrasound reconstruction')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='Warnings only, no progress bars')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help='Simulate raw channel data from a phantom')
    p.add_argument('--phantom', type=Path, required=True)
    _add_config_flags(p)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('delay', help='Apply dynamic receive focusing')
    p.add_argument('--in', type=Path, required=True, dest='inp')
    p.add_argument('--out', type=Path, required=True)
    p.set_defaults(func=cmd_delay)

    p = sub.add_parser('beamform', help='DAS or MV reconstruction to a graymap')
    p.add_argument('--in', type=Path, required=True, dest='inp')
    p.add_argument('--method', choices=METHODS, default='das')
    p.add_argument('--window', choices=WINDOWS, default='boxcar')
    p.add_argument('--subarray', type=int, default=None, help='MV subarray length (default M/2)')
    p.add_argument('--epsilon', type=float, default=None, help='MV diagonal loading (default 1/(10L))')
    p.add_argument('--temporal-avg', type=int, default=0, dest='temporal_avg')
    p.add_argument('--dynrange', type=float, default=60.0, help='Display dynamic range in dB')
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--rf-out', type=Path, default=None, dest='rf_out')
    p.set_defaults(func=cmd_beamform)

    p = sub.add_parser('dataset', help='Generate a simulated training set (desk preset unless --config)')
    p.add_argument('--config', type=Path, default=None, help='TransducerConfig JSON (default: desk preset)')
    p.add_argument('--frames', type=int, default=64)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--out', type=Path, required=True)
    p.set_defaults(func=cmd_dataset, desk=True)

    p = sub.add_parser('train', help='Train the network against MV targets')
    _add_train_flags(p)
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--curve', type=Path, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('infer', help='Reconstruct a delayed frame with a trained network')
    p.add_argument('--model', type=Path, required=True)
    p.add_argument('--in', type=Path, required=True, dest='inp')
    p.add_argument('--out', type=Path, required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser('evaluate', help='Image metrics as a JSON report')
    p.add_argument('--a', type=Path, required=True)
    p.add_argument('--b', type=Path, default=None)
    p.add_argument('--metrics', default='ssim,psnr,msssim')
    p.add_argument('--cnr', type=Path, default=None, help='Region JSON for CNR on image a')
    p.add_argument('--fwhm', default=None, help='auto, row=N or col=K on image a')
    _add_loss_flags(p)
    p.add_argument('--out', type=Path, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('bench', help='Latency of DAS, MV and the network')
    p.add_argument('--data', type=Path, required=True, help='Dataset directory')
    p.add_argument('--methods', default='das,mv,net')
    p.add_argument('--model', type=Path, default=None)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--out', type=Path, default=None)
    p.add_argument('--csv', type=Path, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('table1', help='Cross-validated loss comparison')
    _add_train_flags(p)
    p.add_argument('--out', type=Path, default=None)
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser('table2', help='CNR and FWHM on simulated phantoms')
    _add_config_flags(p)
    p.add_argument('--methods', default='das,mv')
    p.add_argument('--model', type=Path, default=None)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', type=Path, default=None)
    p.set_defaults(func=cmd_table2)

    p = sub.add_parser('pipeline', help='simulate -> delay -> beamform (DAS, MV) -> evaluate')
    p.add_argument('--phantom', type=Path, required=True)
    _add_config_flags(p)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--outdir', type=Path, default=Path('output'))
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    configure_logging(-1 if args.quiet else int(args.verbose))
    try:
        args.func(args)
    except ReconstructionError as e:
        label = 'Numerical failure' if isinstance(e, NumericalError) else 'Error'
        print(f'{label}: {e}', file=sys.stderr)
        raise SystemExit(exit_code(e)) from e
    except json.JSONDecodeError as e:
        print(f'Error: malformed JSON: {e}', file=sys.stderr)
        raise SystemExit(EXIT_DATA) from e


if __name__ == '__main__':
    main()

"""Training of the FCNN against MV targets, k-fold cross-validation and the loss comparison table."""

from __future__ import annotations

import csv
import logging
import math
import statistics
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError, NumericalError
from .losses import LOSS_NAMES, get_loss
from .metrics import LossConfig, psnr, ssim
from .network import FCNN, NetworkConfig, forward, frames_to_batch
from .sim import DelayedFrame

log = logging.getLogger(__name__)

# Cross-validated clinical-scale values (SSIM, PSNR as mean, std), shown next to desk-scale results.
REFERENCE_LOSS_TABLE = {
    'l1': {'ssim': (0.734, 0.0105), 'psnr': (24.3, 0.610)},
    'psnr': {'ssim': (0.743, 0.0128), 'psnr': (24.2, 0.790)},
    'psnr-msssim': {'ssim': (0.749, 0.009), 'psnr': (24.2, 0.487)},
}

CURVE_FIELDS = ('epoch', 'fold', 'loss', 'val_ssim', 'val_psnr')

Pair = tuple[DelayedFrame, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-5
    batch_size: int = 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    folds: int = 5
    loss_fn: str = 'psnr-msssim'
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self) -> None:
        if self.epochs < 1:
            msg = f'epochs must be >= 1, got {self.epochs}'
            raise DataError(msg)
        if not self.learning_rate > 0:
            msg = f'learning_rate must be > 0, got {self.learning_rate}'
            raise DataError(msg)
        if self.batch_size < 1 or self.folds < 1:
            msg = 'batch_size and folds must be >= 1'
            raise DataError(msg)
        if self.loss_fn not in LOSS_NAMES:
            msg = f'Unknown loss {self.loss_fn!r}; choose from {", ".join(LOSS_NAMES)}'
            raise DataError(msg)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            msg = f'Unknown TrainConfig keys: {sorted(unknown)}'
            raise DataError(msg)
        if isinstance(data.get('loss'), Mapping):
            data['loss'] = LossConfig.from_dict(data['loss'])
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        """Defaults for desk-scale images: a 7-tap SSIM window so 32 scanlines still fit three scales."""
        params: dict[str, Any] = {'loss': LossConfig(msssim_window=7)}
        params.update(overrides)
        return cls(**params)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    fold: int
    loss: float
    val_ssim: float | None = None
    val_psnr: float | None = None


@dataclass
class TrainResult:
    net: FCNN
    curve: list[EpochRecord]
    config: TrainConfig
    fold_assignment: np.ndarray | None = None
    held_out: list[int] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.curve]


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(
        self, params: Sequence[Tensor], lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
    ) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v, strict=True):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def assign_folds(n_samples: int, folds: int, seed: int) -> np.ndarray:
    """Fold index of every sample: a seeded permutation dealt round-robin."""
    if folds > n_samples:
        msg = f'{folds} folds need at least {folds} samples, got {n_samples}'
        raise DataError(msg)
    order = np.random.default_rng(seed).permutation(n_samples)
    assignment = np.empty(n_samples, dtype=np.int64)
    assignment[order] = np.arange(n_samples) % folds
    return assignment


def _validate(dataset: Sequence[Pair]) -> None:
    if not dataset:
        msg = 'Training needs a non-empty dataset'
        raise DataError(msg)
    shape = dataset[0][0].data.shape
    for i, (frame, target) in enumerate(item[:2] for item in dataset):
        if frame.data.shape != shape:
            msg = f'Sample {i} has frame shape {frame.data.shape}, expected {shape}'
            raise DataError(msg)
        expected = (shape[2], shape[0])
        if np.shape(target) != expected:
            msg = f'Sample {i} target shape {np.shape(target)} does not match image shape {expected}'
            raise DataError(msg)
        if not (np.all(np.isfinite(target)) and np.min(target) >= 0 and np.max(target) <= 1):
            msg = f'Sample {i} target must lie in [0,1]'
            raise DataError(msg)


def evaluate_net(net: FCNN, samples: Sequence[Pair], cfg: LossConfig) -> tuple[float, float]:
    """Mean SSIM and PSNR of the network output against the targets."""
    scores = []
    for frame, target in (s[:2] for s in samples):
        image = forward(net, frame)
        scores.append((ssim(image, target, cfg), psnr(image, target)))
    return float(np.mean([s for s, _ in scores])), float(np.mean([p for _, p in scores]))


def train(
    dataset: Sequence[Pair],
    cfg: TrainConfig | None = None,
    *,
    network: NetworkConfig | None = None,
    fold: int = 0,
    callback: Callable[[EpochRecord], None] | None = None,
    progress: bool = True,
) -> TrainResult:
    """Fit a fresh FCNN to ``(DelayedFrame, target)`` pairs.

    With ``cfg.folds > 1`` the samples of ``fold`` are held out and scored after every epoch.
    Deterministic for a given seed, data and configuration.
    """
    cfg = cfg or TrainConfig()
    _validate(dataset)
    image_side = min(dataset[0][0].config.samples_per_line, dataset[0][0].config.num_scanlines)
    if cfg.loss_fn == 'psnr-msssim' and image_side < cfg.loss.min_size:
        msg = (
            f'Images of side {image_side} are too small for the MS-SSIM pyramid (needs {cfg.loss.min_size}); '
            'reduce msssim_window or msssim_scales'
        )
        raise DataError(msg)
    n_channels = dataset[0][0].config.num_elements
    network = replace(network, in_channels=n_channels) if network else NetworkConfig(n_channels, seed=cfg.seed)
    assignment = None
    train_idx = np.arange(len(dataset))
    held_out: list[int] = []
    if cfg.folds > 1:
        assignment = assign_folds(len(dataset), cfg.folds, cfg.seed)
        if not 0 <= fold < cfg.folds:
            msg = f'fold {fold} outside [0, {cfg.folds})'
            raise DataError(msg)
        held_out = [int(i) for i in np.flatnonzero(assignment == fold)]
        train_idx = np.flatnonzero(assignment != fold)

    net = FCNN(network)
    net.train()
    optimizer = Adam(net.parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2))
    loss_fn = get_loss(cfg.loss_fn)
    rng = np.random.default_rng(cfg.seed)
    inputs = frames_to_batch([item[0] for item in dataset])
    targets = np.stack([np.asarray(item[1]) for item in dataset])[:, None]
    log.info(
        '[train] %d samples (%d held out), %d parameters, loss=%s, lr=%g',
        len(train_idx),
        len(held_out),
        net.num_parameters,
        cfg.loss_fn,
        cfg.learning_rate,
    )

    curve: list[EpochRecord] = []
    for epoch in tqdm(range(1, cfg.epochs + 1), desc='train', unit='epoch', disable=not progress):
        order = rng.permutation(train_idx)
        total = 0.0
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[start : start + cfg.batch_size])
            try:
                loss = loss_fn(net(ag.tensor(inputs[idx])), targets[idx], cfg.loss)
                value = loss.item()
                if not math.isfinite(value):
                    msg = 'non-finite loss'
                    raise NumericalError(msg)
                loss.backward()
            except NumericalError as e:
                msg = f'Training diverged at epoch {epoch}, batch {batch}: {e}'
                raise NumericalError(msg) from e
            optimizer.step()
            optimizer.zero_grad()
            total += value * len(idx)
        record = EpochRecord(epoch, fold if assignment is not None else 0, total / len(order))
        if held_out:
            val_ssim, val_psnr = evaluate_net(net, [dataset[i] for i in held_out], cfg.loss)
            record = replace(record, val_ssim=val_ssim, val_psnr=val_psnr)
        curve.append(record)
        log.debug('[train] epoch %d/%d loss=%.4f', epoch, cfg.epochs, record.loss)
        if callback is not None:
            callback(record)
    net.eval()
    log.info('[train] done: loss %.4f -> %.4f', curve[0].loss, curve[-1].loss)
    return TrainResult(net=net, curve=curve, config=cfg, fold_assignment=assignment, held_out=held_out)


def smoothed(values: Sequence[float], window: int = 5) -> list[float]:
    """Trailing moving average (shorter windows at the start)."""
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1) : i + 1]
        out.append(sum(chunk) / len(chunk))
    return out


@dataclass(frozen=True)
class FoldScore:
    fold: int
    ssim: float
    psnr: float
    das_ssim: float | None = None


def cross_validate(
    dataset: Sequence[Pair],
    cfg: TrainConfig,
    *,
    network: NetworkConfig | None = None,
    progress: bool = True,
) -> tuple[list[FoldScore], list[EpochRecord]]:
    """One training per fold, each scored on its held-out samples.

    Samples carrying a third element (a DAS display image) also get the DAS baseline score.
    """
    if cfg.folds < 2:
        msg = f'Cross-validation needs folds >= 2, got {cfg.folds}'
        raise DataError(msg)
    scores: list[FoldScore] = []
    curves: list[EpochRecord] = []
    for fold in range(cfg.folds):
        result = train(dataset, cfg, network=network, fold=fold, progress=progress)
        held = [dataset[i] for i in result.held_out]
        val_ssim, val_psnr = evaluate_net(result.net, held, cfg.loss)
        das_ssim = None
        if all(len(s) > 2 for s in held):
            das_ssim = float(np.mean([ssim(s[2], s[1], cfg.loss) for s in held]))
        scores.append(FoldScore(fold, val_ssim, val_psnr, das_ssim))
        curves.extend(result.curve)
        log.info('[cv] fold %d/%d ssim=%.4f psnr=%.2f dB', fold + 1, cfg.folds, val_ssim, val_psnr)
    return scores, curves


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    return statistics.fmean(values), statistics.pstdev(values)


def loss_comparison_harness(
    dataset: Sequence[Pair],
    cfg: TrainConfig,
    *,
    network: NetworkConfig | None = None,
    progress: bool = True,
) -> dict[str, Any]:
    """Cross-validate one network per training loss and tabulate held-out SSIM/PSNR (mean, std)."""
    rows = []
    for name in LOSS_NAMES:
        log.info('[table1] loss %s', name)
        scores, _ = cross_validate(dataset, replace(cfg, loss_fn=name), network=network, progress=progress)
        ssim_mean, ssim_std = _mean_std([s.ssim for s in scores])
        psnr_mean, psnr_std = _mean_std([s.psnr for s in scores])
        rows.append({
            'loss': name,
            'ssim_mean': ssim_mean,
            'ssim_std': ssim_std,
            'psnr_mean': psnr_mean,
            'psnr_std': psnr_std,
            'folds': [asdict(s) for s in scores],
            'reference': REFERENCE_LOSS_TABLE[name],
        })
    return {'rows': rows, 'config': cfg.to_dict(), 'network': network.to_dict() if network else None}


def format_loss_table(report: Mapping[str, Any]) -> str:
    """Plain-text rendering of a loss comparison report."""
    lines = [f'{"Loss":<12} {"SSIM":>18} {"PSNR [dB]":>18}']
    for row in report['rows']:
        ssim_cell = f'{row["ssim_mean"]:.3f} ± {row["ssim_std"]:.3f}'
        psnr_cell = f'{row["psnr_mean"]:.2f} ± {row["psnr_std"]:.2f}'
        lines.append(f'{row["loss"]:<12} {ssim_cell:>18} {psnr_cell:>18}')
    return '\n'.join(lines)


def write_curve(path: Path, curve: Sequence[EpochRecord]) -> None:
    """CSV with columns epoch, fold, loss, val_ssim, val_psnr (empty when not validated)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        writer.writeheader()
        for record in curve:
            writer.writerow({k: ('' if v is None else v) for k, v in asdict(record).items()})
    log.info('Saved: %s', path)


def read_curve(path: Path | str) -> list[EpochRecord]:
    with Path(path).open(newline='', encoding='utf-8') as fh:
        rows = list(csv.DictReader(fh))

    def number(text: str) -> float | None:
        return float(text) if text else None

    return [
        EpochRecord(int(r['epoch']), int(r['fold']), float(r['loss']), number(r['val_ssim']), number(r['val_psnr']))
        for r in rows
    ]

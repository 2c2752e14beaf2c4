"""Fully convolutional encoder-decoder that maps delayed channel data to an image.

Layout of a forward pass on ``[B, M, N, K]`` (channels = elements, height = depth samples,
width = scanlines)::

    input -> 1x1 proj -> dense block -> down -> dense block -> down -> dense block      (encoder)
          -> dense block -> up -> dense block -> up -> dense block -> 1x1 head          (decoder)
    output = hard_sigmoid(head + 1x1 projection of input)                                (long skip)

Each dense block concatenates the outputs of all its previous layers (short skips) and closes with
a 1x1 transition back to the level width.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator, Mapping
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import autograd as ag
from .autograd import Tensor
from .container import read_checkpoint, write_checkpoint
from .errors import DataError
from .sim import DelayedFrame

log = logging.getLogger(__name__)

LEVELS = 3
_MULTIPLE = 2 ** (LEVELS - 1)


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 64
    base_channels: int = 4
    block_layers: int = 1
    kernel_size: int = 3
    encoder_blocks: int = LEVELS
    decoder_blocks: int = LEVELS
    padding_mode: str = 'reflect'
    seed: int = 0

    def __post_init__(self) -> None:
        if self.encoder_blocks != LEVELS or self.decoder_blocks != LEVELS:
            msg = f'The network uses {LEVELS} encoder and {LEVELS} decoder blocks'
            raise DataError(msg)
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            msg = f'kernel_size must be odd, got {self.kernel_size}'
            raise DataError(msg)
        if min(self.in_channels, self.base_channels, self.block_layers) < 1:
            msg = 'in_channels, base_channels and block_layers must be >= 1'
            raise DataError(msg)
        if self.padding_mode != 'reflect':
            msg = f'Only reflection padding is supported, got {self.padding_mode!r}'
            raise DataError(msg)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> NetworkConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            msg = f'Unknown NetworkConfig keys: {sorted(unknown)}'
            raise DataError(msg)
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**level for level in range(LEVELS))


class Module:
    """Container of parameters (trainable tensors), buffers (numpy state) and sub-modules."""

    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args, **kwargs) -> Tensor:
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs) -> Tensor:
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, Any]]:
        for name, value in vars(self).items():
            if isinstance(value, list):
                for i, item in enumerate(value):
                    yield f'{name}.{i}', item
            else:
                yield name, value

    def named_parameters(self, prefix: str = '') -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{prefix}{name}.')

    def named_buffers(self, prefix: str = '') -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f'{prefix}{name}.')

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            msg = f'Checkpoint does not match network (missing {missing}, unexpected {extra})'
            raise DataError(msg)
        for name, value in expected.items():
            if np.shape(state[name]) != value.shape:
                msg = f'Checkpoint tensor {name} has shape {np.shape(state[name])}, expected {value.shape}'
                raise DataError(msg)
            value[...] = state[name]

    def train(self, mode: bool = True) -> Module:
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> Module:
        """Cast every parameter and buffer in place (e.g. to float64 for gradient checks)."""
        for module in self.modules():
            for name, value in list(vars(module).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                elif isinstance(value, np.ndarray):
                    setattr(module, name, value.astype(dtype))
        return self


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    fan_in = math.prod(shape[1:])
    return ag.tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape), requires_grad=True)


class Conv2d(Module):
    """Convolution with reflection padding of ``kernel_size // 2`` (size preserving at stride 1)."""

    def __init__(
        self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator, stride: int = 1
    ) -> None:
        super().__init__()
        self.stride = stride
        self.pad = kernel_size // 2
        self.weight = _he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size))
        self.bias = ag.tensor(np.zeros(out_channels), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if self.pad:
            x = ag.pad_reflect(x, self.pad, self.pad, self.pad, self.pad)
        return ag.conv2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = ag.tensor(np.ones(channels), requires_grad=True)
        self.beta = ag.tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=ag.default_dtype())
        self.running_var = np.ones(channels, dtype=ag.default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            running = (self.running_mean, self.running_var)
            out, _, _ = ag.batch_norm(x, self.gamma, self.beta, eps=self.eps, running=running)
            return out
        out, mu, var = ag.batch_norm(x, self.gamma, self.beta, eps=self.eps)
        count = x.data.size / x.shape[1]
        unbiased = var * count / max(count - 1, 1)
        self.running_mean *= 1 - self.momentum
        self.running_mean += self.momentum * mu
        self.running_var *= 1 - self.momentum
        self.running_var += self.momentum * unbiased
        return out


class ConvBlock(Module):
    """conv -> batch norm -> SiLU."""

    def __init__(
        self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator, stride: int = 1
    ) -> None:
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng, stride)
        self.norm = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return ag.silu(self.norm(self.conv(x)))


class DenseBlock(Module):
    def __init__(self, channels: int, layers: int, kernel_size: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.layers = [ConvBlock(channels * (i + 1), channels, kernel_size, rng) for i in range(layers)]
        self.transition = Conv2d(channels * (layers + 1), channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        features = [x]
        for layer in self.layers:
            features.append(layer(ag.concat(features, axis=1)))
        return self.transition(ag.concat(features, axis=1))


class Upsample(Module):
    """Nearest-neighbour x2 followed by a conv block."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.block = ConvBlock(in_channels, out_channels, kernel_size, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(ag.upsample2x(x))


class FCNN(Module):
    def __init__(self, config: NetworkConfig) -> None:
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        k, n = config.kernel_size, config.block_layers
        w = config.widths
        self.input_proj = Conv2d(config.in_channels, w[0], 1, rng)
        self.encoder = [DenseBlock(w[level], n, k, rng) for level in range(LEVELS)]
        self.down = [ConvBlock(w[level], w[level + 1], k, rng, stride=2) for level in range(LEVELS - 1)]
        self.decoder = [DenseBlock(w[level], n, k, rng) for level in reversed(range(LEVELS))]
        self.up = [Upsample(w[level + 1], w[level], k, rng) for level in reversed(range(LEVELS - 1))]
        self.head = Conv2d(w[0], 1, 1, rng)
        self.skip = Conv2d(config.in_channels, 1, 1, rng)

    @property
    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            msg = f'Network expects [B, {self.config.in_channels}, H, W] input, got {x.shape}'
            raise DataError(msg)
        height, width = x.shape[2:]
        pad_h, pad_w = -height % _MULTIPLE, -width % _MULTIPLE
        padded = ag.pad_reflect(x, 0, pad_h, 0, pad_w) if pad_h or pad_w else x
        h = self.input_proj(padded)
        for level in range(LEVELS):
            h = self.encoder[level](h)
            if level < LEVELS - 1:
                h = self.down[level](h)
        for level in range(LEVELS):
            h = self.decoder[level](h)
            if level < LEVELS - 1:
                h = self.up[level](h)
        h = self.head(h)
        if pad_h or pad_w:
            h = h[:, :, :height, :width]
        return ag.hard_sigmoid(h + self.skip(x))


def frames_to_batch(frames: list[DelayedFrame]) -> np.ndarray:
    """Stack frames ``[K, M, N]`` into network input ``[B, M, N, K]``."""
    return np.stack([f.data.transpose(1, 2, 0) for f in frames])


def forward(net: FCNN, frame: DelayedFrame) -> np.ndarray:
    """Inference on one frame: eval-mode batch norm, no graph, returns the ``[N, K]`` image."""
    was_training = net.training
    net.eval()
    try:
        with ag.no_grad():
            out = net(ag.tensor(frames_to_batch([frame])))
    finally:
        net.train(was_training)
    return out.data[0, 0].astype(np.float64)


@dataclass(frozen=True)
class _FusedConv:
    """Convolution with its batch norm folded in, weights laid out for a channels-last matmul."""

    matrix: np.ndarray  # (C * k * k, O)
    bias: np.ndarray
    kernel_size: int
    stride: int
    activate: bool

    @classmethod
    def fold(cls, conv: Conv2d, norm: BatchNorm2d | None, dtype) -> _FusedConv:
        weight, bias = conv.weight.data.astype(np.float64), conv.bias.data.astype(np.float64)
        if norm is not None:
            scale = norm.gamma.data / np.sqrt(norm.running_var + norm.eps)
            weight = weight * scale[:, None, None, None]
            bias = (bias - norm.running_mean) * scale + norm.beta.data
        matrix = np.ascontiguousarray(weight.reshape(len(weight), -1).T, dtype=dtype)
        return cls(matrix, bias.astype(dtype), weight.shape[-1], conv.stride, norm is not None)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """``x`` is ``(H, W, C)``."""
        k, s = self.kernel_size, self.stride
        if k == 1:
            cols = x[::s, ::s]
        else:
            pad = k // 2
            if pad >= min(x.shape[:2]):
                msg = f'Reflection padding {pad} too large for {x.shape[0]}x{x.shape[1]}'
                raise DataError(msg)
            x = x[ag.reflect_indices(x.shape[0], pad, pad)][:, ag.reflect_indices(x.shape[1], pad, pad)]
            windows = sliding_window_view(x, (k, k), axis=(0, 1))[::s, ::s]  # (Ho, Wo, C, k, k)
            cols = windows.reshape(*windows.shape[:2], -1)
        out = cols @ self.matrix + self.bias
        return out * expit(out) if self.activate else out


class InferencePlan:
    """Graph-free eval-mode evaluation of an FCNN, one frame at a time.

    Batch norm is folded into the preceding convolutions and activations stay channels-last so every
    convolution is a single matmul. The plan snapshots the weights: rebuild it after further training.
    """

    def __init__(self, net: FCNN, dtype=np.float32) -> None:
        self.config = net.config
        self.dtype = dtype

        def block(b: ConvBlock) -> _FusedConv:
            return _FusedConv.fold(b.conv, b.norm, dtype)

        def conv(c: Conv2d) -> _FusedConv:
            return _FusedConv.fold(c, None, dtype)

        def dense(d: DenseBlock) -> tuple[list[_FusedConv], _FusedConv]:
            return [block(layer) for layer in d.layers], conv(d.transition)

        self.input_proj, self.head, self.skip = conv(net.input_proj), conv(net.head), conv(net.skip)
        self.encoder = [dense(d) for d in net.encoder]
        self.down = [block(b) for b in net.down]
        self.decoder = [dense(d) for d in net.decoder]
        self.up = [block(u.block) for u in net.up]

    @staticmethod
    def _dense(x: np.ndarray, layers: list[_FusedConv], transition: _FusedConv) -> np.ndarray:
        features = x
        for layer in layers:
            features = np.concatenate([features, layer(features)], axis=-1)
        return transition(features)

    def __call__(self, frame: DelayedFrame) -> np.ndarray:
        """The ``[N, K]`` display image of one frame, matching :func:`forward`."""
        x = frame.data.transpose(2, 0, 1).astype(self.dtype)  # (N, K, M)
        if x.shape[-1] != self.config.in_channels:
            msg = f'Network expects {self.config.in_channels} elements, got {x.shape[-1]}'
            raise DataError(msg)
        height, width = x.shape[:2]
        pad_h, pad_w = -height % _MULTIPLE, -width % _MULTIPLE
        if pad_h >= height or pad_w >= width:
            msg = f'Reflection padding ({pad_h},{pad_w}) too large for {height}x{width}'
            raise DataError(msg)
        padded = x[ag.reflect_indices(height, 0, pad_h)][:, ag.reflect_indices(width, 0, pad_w)]
        h = self.input_proj(padded)
        for level in range(LEVELS):
            h = self._dense(h, *self.encoder[level])
            if level < LEVELS - 1:
                h = self.down[level](h)
        for level in range(LEVELS):
            h = self._dense(h, *self.decoder[level])
            if level < LEVELS - 1:
                h = self.up[level](h.repeat(2, axis=0).repeat(2, axis=1))
        h = self.head(h)[:height, :width, 0] + self.skip(x)[..., 0]
        return np.clip(h / 6 + 0.5, 0.0, 1.0).astype(np.float64)


def save_checkpoint(path: Path, net: FCNN, metadata: dict[str, Any] | None = None) -> None:
    """Write parameters and batch-norm running statistics as a USNN container."""
    config = {'network': net.config.to_dict(), **(metadata or {})}
    write_checkpoint(path, config, net.state_dict())


def load_checkpoint(path: Path | str) -> tuple[FCNN, dict[str, Any]]:
    """Rebuild the network recorded in a checkpoint, in eval mode."""
    config, tensors = read_checkpoint(path)
    if 'network' not in config:
        msg = f'Checkpoint lacks a network config: {path}'
        raise DataError(msg)
    net = FCNN(NetworkConfig.from_dict(config['network']))
    net.load_state_dict(tensors)
    net.eval()
    log.debug('[model] loaded %d parameters from %s', net.num_parameters, path)
    return net, config

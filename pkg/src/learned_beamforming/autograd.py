"""Minimal reverse-mode tensor engine on numpy arrays.

Every op returns a new ``Tensor`` that remembers its inputs (``depends_on``) and a ``grad_fn``
closure that pushes the output gradient back to them. ``Tensor.backward`` walks the recorded graph
in reverse topological order. Images are laid out ``[batch, channel, height, width]``.

Values are checked for NaN/Inf after every op; a non-finite value raises ``NumericalError``.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, GraphError, NumericalError

_state = {'dtype': np.float32, 'grad': True, 'check_finite': True}


def default_dtype() -> type[np.floating]:
    return _state['dtype']


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype of newly created tensors (``'float32'`` or ``'float64'``)."""
    previous = _state['dtype']
    _state['dtype'] = np.dtype(name).type
    try:
        yield
    finally:
        _state['dtype'] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (inference)."""
    previous = _state['grad']
    _state['grad'] = False
    try:
        yield
    finally:
        _state['grad'] = previous


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        depends_on: Sequence[Tensor] = (),
        grad_fn: Callable[[np.ndarray], None] | None = None,
        name: str = '',
    ) -> None:
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.depends_on = tuple(depends_on)
        self.grad_fn = grad_fn
        self.grad: np.ndarray | None = None
        self.name = name

    def __repr__(self) -> str:
        name = f', name={self.name}' if self.name else ''
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad}{name})'

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode accumulation of d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if not self.requires_grad or (self.grad_fn is None and not self.depends_on):
            msg = 'backward() needs a tensor produced by a recorded forward pass'
            raise GraphError(msg)
        if grad is None:
            if self.data.size != 1:
                msg = f'backward() on a non-scalar tensor {self.shape} needs an explicit gradient'
                raise GraphError(msg)
            grad = np.ones_like(self.data)
        topo = build_topo(self)
        for node in topo:
            if node.depends_on:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node.grad_fn is not None and node.grad is not None:
                node.grad_fn(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def tensor(data, requires_grad: bool = False, name: str = '') -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def build_topo(node: Tensor) -> list[Tensor]:
    """Topological order of the graph ending at ``node`` (inputs first)."""
    visited: set[int] = set()
    topo: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(node, False)]
    while stack:
        current, expanded = stack.pop()
        if expanded:
            topo.append(current)
            continue
        if id(current) in visited:
            continue
        visited.add(id(current))
        stack.append((current, True))
        stack.extend((parent, False) for parent in current.depends_on if id(parent) not in visited)
    return topo


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = grad if t.grad is None else t.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    if _state['check_finite'] and not np.all(np.isfinite(data)):
        msg = f'Non-finite values produced by {op}'
        raise NumericalError(msg)
    requires_grad = _state['grad'] and any(p.requires_grad for p in parents)
    if not requires_grad:
        return Tensor(data)
    return Tensor(data, requires_grad=True, depends_on=parents, grad_fn=backward, name=op)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), grad_fn, 'add')


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), grad_fn, 'sub')


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), grad_fn, 'mul')


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

    with np.errstate(divide='ignore', invalid='ignore'):
        out = a.data / b.data
    return _result(out, (a, b), grad_fn, 'div')


def power(a: Tensor, exponent: float) -> Tensor:
    def grad_fn(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _result(a.data**exponent, (a,), grad_fn, 'pow')


def log(a: Tensor) -> Tensor:
    def grad_fn(g):
        _accumulate(a, g / a.data)

    with np.errstate(divide='ignore', invalid='ignore'):
        out = np.log(a.data)
    return _result(out, (a,), grad_fn, 'log')


def absolute(a: Tensor) -> Tensor:
    def grad_fn(g):
        _accumulate(a, g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), grad_fn, 'abs')


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    """Clip to ``[low, high]``; gradient passes only strictly inside."""
    inside = (a.data > low) & (a.data < high)

    def grad_fn(g):
        _accumulate(a, g * inside)

    return _result(np.clip(a.data, low, high), (a,), grad_fn, 'clamp')


def silu(a: Tensor) -> Tensor:
    """``x * sigmoid(x)``."""
    s = 1 / (1 + np.exp(-a.data))

    def grad_fn(g):
        _accumulate(a, g * s * (1 + a.data * (1 - s)))

    return _result(a.data * s, (a,), grad_fn, 'silu')


def hard_sigmoid(a: Tensor) -> Tensor:
    """Clamped linear ``clip(x/6 + 1/2, 0, 1)``."""
    z = a.data / 6 + 0.5
    inside = (z > 0) & (z < 1)

    def grad_fn(g):
        _accumulate(a, g * inside / 6)

    return _result(np.clip(z, 0.0, 1.0), (a,), grad_fn, 'hard_sigmoid')


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn, 'sum')


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else math.prod(np.atleast_1d(a.shape)[list(np.atleast_1d(axis))])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def grad_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), grad_fn, 'reshape')


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing."""

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] += g
        _accumulate(a, full)

    return _result(a.data[index], (a,), grad_fn, 'getitem')


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0, *sizes])

    def grad_fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:], strict=True):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn, 'concat')


def reflect_indices(size: int, before: int, after: int) -> np.ndarray:
    """Source index of every padded position under reflection (edge not repeated)."""
    return np.pad(np.arange(size), (before, after), mode='reflect')


def pad_reflect(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Reflection padding of the two spatial axes."""
    height, width = a.shape[-2:]
    if max(top, bottom) >= height or max(left, right) >= width:
        msg = f'Reflection padding ({top},{bottom},{left},{right}) too large for {height}x{width}'
        raise DataError(msg)
    rows = reflect_indices(height, top, bottom)[:, None]
    cols = reflect_indices(width, left, right)[None, :]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (..., rows, cols), g)
        _accumulate(a, full)

    return _result(a.data[..., rows, cols], (a,), grad_fn, 'pad_reflect')


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 2-D cross-correlation, ``x [B,C,H,W]`` with ``w [O,C,kh,kw]`` -> ``[B,O,Ho,Wo]``."""
    _, _, kh, kw = w.shape
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2:4]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents = (x, w, b)

    def grad_fn(g):
        if w.requires_grad:
            _accumulate(w, np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[
                        ..., i, j
                    ].transpose(0, 3, 1, 2)
            _accumulate(x, gx)

    return _result(np.ascontiguousarray(out), parents, grad_fn, 'conv2d')


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    *,
    eps: float = 1e-5,
    running: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization over ``(B, H, W)``.

    With ``running=(mean, var)`` the given statistics are used (inference); otherwise the batch
    statistics are used and returned so the caller can update its running averages.
    """
    axes = (0, 2, 3)
    if running is None:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    else:
        mu, var = running
    inv_std = 1 / np.sqrt(var + eps)
    shape = (1, -1, 1, 1)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    count = x.data.size / x.shape[1]

    def grad_fn(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(shape)
        if running is not None:
            _accumulate(x, dxhat * inv_std.reshape(shape))
            return
        dx = (
            count * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        ) * (inv_std.reshape(shape) / count)
        _accumulate(x, dx)

    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    return _result(out, (x, gamma, beta), grad_fn, 'batch_norm'), mu, var


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour upsampling of the spatial axes by two."""

    def grad_fn(g):
        b, c, h, w = a.shape
        _accumulate(a, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _result(a.data.repeat(2, axis=2).repeat(2, axis=3), (a,), grad_fn, 'upsample2x')


def avg_pool2x(a: Tensor) -> Tensor:
    """2x2 average pooling; odd trailing rows/columns are dropped."""
    b, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    cropped = a.data[:, :, : 2 * h2, : 2 * w2]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4
        _accumulate(a, full)

    return _result(cropped.reshape(b, c, h2, 2, w2, 2).mean(axis=(3, 5)), (a,), grad_fn, 'avg_pool2x')

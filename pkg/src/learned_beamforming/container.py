"""Versioned little-endian binary containers.

``USRF`` channel-data frames::

    magic 'USRF' | version u32 | n_scanlines u32 | n_channels u32 | n_samples u32 | dtype u8
    payload (scanline-major, then channel, then sample) | meta_len u32 | meta JSON

dtype 0 is int16 (RawFrame), 1 is float32 (DelayedFrame). The metadata carries the
TransducerConfig, the seed and the processing stage.

``USRB`` rf images: magic | version | rows u32 | cols u32 | float32 payload | meta_len | meta JSON.

``USNN`` network checkpoints::

    magic 'USNN' | version u32 | cfg_len u32 | cfg JSON | n_tensors u32
    per tensor: name_len u16 | name utf-8 | ndim u8 | ndim x u32 shape
    float32 payload of every tensor in directory order
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError
from .sim import DelayedFrame, RawFrame, TransducerConfig
from .utils import dumps_json

log = logging.getLogger(__name__)

FRAME_MAGIC = b'USRF'
RF_MAGIC = b'USRB'
MODEL_MAGIC = b'USNN'
VERSION = 1

_DTYPES = {0: np.dtype('<i2'), 1: np.dtype('<f4')}


class _Reader:
    def __init__(self, data: bytes, path: Path) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            msg = f'Truncated container: {self.path}'
            raise DataError(msg)
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: np.dtype, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()

    def json_block(self) -> Any:
        (length,) = self.unpack('<I')
        try:
            return json.loads(self.take(length).decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            msg = f'Malformed metadata block in {self.path}: {e}'
            raise DataError(msg) from e

    def header(self, magic: bytes) -> None:
        if self.take(4) != magic:
            msg = f'Not a {magic.decode()} container: {self.path}'
            raise DataError(msg)
        (version,) = self.unpack('<I')
        if version != VERSION:
            msg = f'Unsupported {magic.decode()} version {version} in {self.path}'
            raise DataError(msg)

    def finish(self) -> None:
        if self.pos != len(self.data):
            msg = f'Trailing bytes after container payload: {self.path}'
            raise DataError(msg)


def _json_block(obj: Any) -> bytes:
    raw = dumps_json(obj).encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def _read(path: Path | str) -> _Reader:
    path = Path(path)
    if not path.exists():
        msg = f'File not found: {path}'
        raise DataError(msg)
    return _Reader(path.read_bytes(), path)


def _write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    log.info('Saved: %s', path)


def encode_frame(frame: RawFrame | DelayedFrame, metadata: dict[str, Any] | None = None) -> bytes:
    code = 0 if isinstance(frame, RawFrame) else 1
    meta = {'stage': 'raw' if code == 0 else 'delayed', **(metadata or {}), 'config': frame.config.to_dict()}
    payload = np.ascontiguousarray(frame.data, dtype=_DTYPES[code]).tobytes()
    header = FRAME_MAGIC + struct.pack('<I3IB', VERSION, *frame.data.shape, code)
    return header + payload + _json_block(meta)


def decode_frame(data: bytes, path: Path | str = '<bytes>') -> tuple[RawFrame | DelayedFrame, dict[str, Any]]:
    reader = _Reader(data, Path(path))
    reader.header(FRAME_MAGIC)
    *shape, code = reader.unpack('<3IB')
    if code not in _DTYPES:
        msg = f'Unknown dtype code {code} in {path}'
        raise DataError(msg)
    values = reader.array(_DTYPES[code], tuple(shape))
    meta = reader.json_block()
    reader.finish()
    if 'config' not in meta:
        msg = f'Frame metadata lacks a transducer config: {path}'
        raise DataError(msg)
    config = TransducerConfig.from_dict(meta['config'])
    frame_cls = RawFrame if code == 0 else DelayedFrame
    return frame_cls(values.astype(np.int16 if code == 0 else np.float32), config), meta


def write_frame(path: Path, frame: RawFrame | DelayedFrame, metadata: dict[str, Any] | None = None) -> None:
    _write(path, encode_frame(frame, metadata))


def read_frame(path: Path | str) -> tuple[RawFrame | DelayedFrame, dict[str, Any]]:
    reader = _read(path)
    return decode_frame(reader.data, reader.path)


def write_rf(path: Path, rf: np.ndarray, metadata: dict[str, Any] | None = None) -> None:
    rf = np.asarray(rf)
    if rf.ndim != 2:
        msg = f'rf image must be 2-D, got {rf.shape}'
        raise DataError(msg)
    header = RF_MAGIC + struct.pack('<I2I', VERSION, *rf.shape)
    payload = np.ascontiguousarray(rf, dtype='<f4').tobytes()
    _write(path, header + payload + _json_block(metadata or {}))


def read_rf(path: Path | str) -> tuple[np.ndarray, dict[str, Any]]:
    reader = _read(path)
    reader.header(RF_MAGIC)
    shape = reader.unpack('<2I')
    rf = reader.array(np.dtype('<f4'), shape).astype(np.float32)
    meta = reader.json_block()
    reader.finish()
    return rf, meta


def encode_checkpoint(config: dict[str, Any], tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MODEL_MAGIC, struct.pack('<I', VERSION), _json_block(config), struct.pack('<I', len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode('utf-8')
        parts.append(struct.pack(f'<H{len(encoded)}sB', len(encoded), encoded, value.ndim))
        parts.append(struct.pack(f'<{value.ndim}I', *value.shape))
    parts.extend(np.ascontiguousarray(value, dtype='<f4').tobytes() for value in tensors.values())
    return b''.join(parts)


def decode_checkpoint(data: bytes, path: Path | str = '<bytes>') -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    reader = _Reader(data, Path(path))
    reader.header(MODEL_MAGIC)
    config = reader.json_block()
    (count,) = reader.unpack('<I')
    directory = []
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        directory.append((name, reader.unpack(f'<{ndim}I')))
    tensors = {name: reader.array(np.dtype('<f4'), shape).astype(np.float32) for name, shape in directory}
    reader.finish()
    return config, tensors


def write_checkpoint(path: Path, config: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    _write(path, encode_checkpoint(config, tensors))


def read_checkpoint(path: Path | str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    reader = _read(path)
    return decode_checkpoint(reader.data, reader.path)

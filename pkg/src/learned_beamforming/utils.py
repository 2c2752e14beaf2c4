"""Shared utility helpers for learned_beamforming package.

Centralizes file save helpers, artifact extension checks, the 8-bit graymap codec and logging
setup so the CLI and the web API stay consistent.
"""

from __future__ import annotations

import json
import logging
import sys
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

FRAME_EXTENSIONS: set[str] = {'.usrf'}
"""Channel-data containers (raw int16 or delayed float32)."""

IMAGE_EXTENSIONS: set[str] = {'.pgm', '.usrb'}
"""Display graymaps and float32 rf images."""

MODEL_EXTENSIONS: set[str] = {'.usnn'}
"""Network checkpoints."""

CONFIG_EXTENSIONS: set[str] = {'.json'}

_PGM_MAXVAL = 255


def configure_logging(verbosity: int = 0) -> None:
    """Route package logs to stderr; ``verbosity`` -1 quiet, 0 info, 1 debug."""
    level = {-1: logging.WARNING, 0: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format='%(message)s', stream=sys.stderr, force=True)


def save_text(path: Path, text: str) -> None:
    """Persist UTF-8 text, creating parent directories if needed."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding='utf-8')
    log.info('Saved: %s', path)


def _json_default(obj: Any):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    msg = f'Object of type {type(obj).__name__} is not JSON serializable'
    raise TypeError(msg)


def dumps_json(obj: Any) -> str:
    # allow_nan keeps +inf PSNR of identical images representable
    return json.dumps(obj, indent=2, default=_json_default, allow_nan=True)


def save_json(path: Path, obj: Any) -> None:
    save_text(path, dumps_json(obj) + '\n')


def load_json(path: Path | str) -> Any:
    path = Path(path)
    if not path.exists():
        msg = f'File not found: {path}'
        raise DataError(msg)
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        msg = f'Malformed JSON in {path}: {e}'
        raise DataError(msg) from e


def _suffix(path: Path | str) -> str:
    return Path(path).suffix.lower()


def is_frame_file(path: Path | str) -> bool:
    """Return True if path has a channel-data container extension."""
    return _suffix(path) in FRAME_EXTENSIONS


def is_image_file(path: Path | str) -> bool:
    return _suffix(path) in IMAGE_EXTENSIONS


def require_ext(path: Path | str, allowed: Iterable[str], kind: str) -> None:
    """Raise DataError if path extension not in allowed set."""
    ext = _suffix(path)
    if ext not in {e.lower() for e in allowed}:
        msg = f'Unsupported {kind} extension: {ext or "(none)"}'
        raise DataError(msg)


def quantize_gray(image: np.ndarray) -> np.ndarray:
    """Map a [0,1] image to 0..255; numpy's rint rounds half to even."""
    return np.rint(np.clip(image, 0.0, 1.0) * _PGM_MAXVAL).astype(np.uint8)


def write_pgm(path: Path, image: np.ndarray, metadata: dict[str, Any] | None = None) -> None:
    """Write a 2-D [0,1] image as a binary portable graymap (P5, 8-bit).

    ``metadata`` is stored as a one-line JSON header comment.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        msg = f'Graymap needs a 2-D image, got shape {image.shape}'
        raise DataError(msg)
    rows, cols = image.shape
    comment = f'# {json.dumps(metadata, default=_json_default)}\n' if metadata else ''
    header = f'P5\n{comment}{cols} {rows}\n{_PGM_MAXVAL}\n'.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + quantize_gray(image).tobytes())
    log.info('Saved: %s', path)


def _parse_pgm(path: Path | str) -> tuple[np.ndarray, list[bytes]]:
    path = Path(path)
    if not path.exists():
        msg = f'File not found: {path}'
        raise DataError(msg)
    data = path.read_bytes()
    tokens: list[bytes] = []
    comments: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b'#':
            end = data.find(b'\n', pos)
            end = len(data) if end < 0 else end
            comments.append(data[pos + 1 : end].strip())
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b'P5':
        msg = f'Not a binary graymap: {path}'
        raise DataError(msg)
    try:
        cols, rows, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        msg = f'Malformed graymap header in {path}'
        raise DataError(msg) from e
    if len(data) < pos + 1 + rows * cols:
        msg = f'Truncated graymap: {path}'
        raise DataError(msg)
    pixels = np.frombuffer(data, dtype=np.uint8, count=rows * cols, offset=pos + 1)
    return pixels.reshape(rows, cols).astype(np.float64) / maxval, comments


def read_pgm(path: Path | str) -> np.ndarray:
    """Read a P5 graymap back into a float64 image in [0,1]."""
    return _parse_pgm(path)[0]


def read_pgm_metadata(path: Path | str) -> dict[str, Any]:
    """JSON metadata written by ``write_pgm`` (empty when absent)."""
    for comment in _parse_pgm(path)[1]:
        try:
            meta = json.loads(comment)
        except (json.JSONDecodeError, UnicodeDecodeError):
            continue
        if isinstance(meta, dict):
            return meta
    return {}

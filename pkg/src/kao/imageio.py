"""Binary netpbm (P5 graymap / P6 pixmap) I/O for grids in [-1, 1]."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write
from .errors import DataError, DomainError
from .grid import Grid, as_grid


def quantize(g) -> tuple[np.ndarray, int]:
    """Map [-1, 1] to bytes, rounding half away from zero. Returns (bytes, clamped count)."""
    g = np.asarray(g, dtype=np.float64)
    clamped = int(np.count_nonzero((g < -1) | (g > 1)))
    v = (np.clip(g, -1.0, 1.0) + 1.0) * 127.5
    q = np.floor(v + 0.5)  # v >= 0, so this is half-away-from-zero
    return q.astype(np.uint8), clamped


def dequantize(q) -> Grid:
    return as_grid(np.asarray(q, dtype=np.float64) / 127.5 - 1.0)


def encode_image(g) -> tuple[bytes, int]:
    g = np.asarray(g)
    if g.ndim == 2:
        g = g[None]
    if g.ndim != 3 or g.shape[0] not in (1, 3):
        raise DomainError(f"image must be [1,H,W] or [3,H,W], got {g.shape}")
    q, clamped = quantize(g)
    c, h, w = q.shape
    magic = "P5" if c == 1 else "P6"
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes(), clamped


def write_image(g, path) -> int:
    """Write ``g`` as P5/P6; returns the number of out-of-range values clamped."""
    payload, clamped = encode_image(g)
    atomic_write(path, payload)
    return clamped


_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def decode_bytes(data: bytes) -> np.ndarray:
    """Raw uint8 array [C,H,W] from a P5/P6 byte string."""
    m = _HEADER.match(data)
    if not m:
        raise DataError("not a binary P5/P6 file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise DataError(f"only maxval 255 is supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    body = data[m.end():]
    if len(body) != w * h * c:
        raise DataError(f"payload has {len(body)} bytes, expected {w * h * c}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def read_image(path) -> Grid:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return dequantize(decode_bytes(data))


def read_mask(path) -> Grid:
    """Binary mask from a graymap: 255 -> 1, 0 -> 0, anything else rejected."""
    q = decode_bytes(Path(path).read_bytes())
    if q.shape[0] != 1:
        raise DataError("mask must be a P5 graymap")
    if not np.all((q == 0) | (q == 255)):
        raise DataError(f"mask {path} is not binary")
    return as_grid(q == 255)


def write_mask(m, path) -> None:
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise DomainError("mask must be binary")
    write_image(m.astype(np.float64) * 2.0 - 1.0, path)


def grid_image(images, sep: int = 2, fill: float = 1.0) -> Grid:
    """Lay out rows of equally sized images with ``sep``-pixel separators."""
    rows = [list(r) for r in images]
    first = np.asarray(rows[0][0])
    c, h, w = first.shape
    for r in rows:
        for im in r:
            if np.asarray(im).shape != (c, h, w):
                raise DomainError("all images in a figure grid must share extents")
    ncol = max(len(r) for r in rows)
    H = len(rows) * h + (len(rows) - 1) * sep
    W = ncol * w + (ncol - 1) * sep
    out = np.full((c, H, W), fill, dtype=np.float32)
    for i, r in enumerate(rows):
        for j, im in enumerate(r):
            y, x = i * (h + sep), j * (w + sep)
            out[:, y:y + h, x:x + w] = im
    return out

"""Binary parameter checkpoints.

Layout (little-endian): 8-byte magic, 1 version byte, u32 record count, then per
record u32 name length, UTF-8 name, u32 rank, rank x u32 extents, float32 values.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"KAOCKPT\x00"
VERSION = 1


def encode(records: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(records)))
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(data: bytes) -> "OrderedDict[str, np.ndarray]":
    if data[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<BI", data, 8)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 13
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated checkpoint: {exc}") from exc
    if pos != len(data):
        raise DataError("trailing bytes after last checkpoint record")
    return out


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, records: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode(records))


def load(path) -> "OrderedDict[str, np.ndarray]":
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)

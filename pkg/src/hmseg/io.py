"""HMT1 tensor container.

Layout: ``HMT1\\n``, an ASCII line ``ndim d0 ... d{n-1} dtype\\n`` and a raw
little-endian row-major payload. Several containers may be concatenated in one
stream, which is how checkpoints are stored.
"""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"HMT1\n"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}
_NAMES = {v: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    """Raised for malformed or truncated container files."""


def _dtype_name(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt == np.float64:
        return "f64"
    if dt == np.float32:
        return "f32"
    if dt == np.uint8:
        return "u8"
    raise FormatError(f"unsupported dtype {arr.dtype}; expected one of f32, f64, u8")


def write_tensor(stream: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    name = _dtype_name(arr)
    header = " ".join([str(arr.ndim), *map(str, arr.shape), name]) + "\n"
    stream.write(MAGIC)
    stream.write(header.encode("ascii"))
    stream.write(np.ascontiguousarray(arr, dtype=DTYPES[name]).tobytes())


def _readline(stream: BinaryIO, limit: int = 4096) -> bytes:
    line = stream.readline(limit)
    if not line.endswith(b"\n"):
        raise FormatError("truncated header line")
    return line


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    parts = _readline(stream).decode("ascii").split()
    try:
        ndim = int(parts[0])
        shape = tuple(int(p) for p in parts[1:1 + ndim])
        name = parts[1 + ndim]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed header {parts!r}") from exc
    if len(parts) != ndim + 2 or name not in DTYPES or any(d < 0 for d in shape):
        raise FormatError(f"malformed header {parts!r}")
    dtype = DTYPES[name]
    count = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"truncated payload: expected {count * dtype.itemsize} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    atomic_write(path, buf.getvalue())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def atomic_write(path, data: bytes) -> None:
    """Write via a sibling temp file so readers never observe partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()

"""Binary array blobs.

Layout (all little-endian)::

    bytes 0-3    magic  b"AFB1"
    bytes 4-7    uint32 ndim (1 or 2)
    bytes 8-11   uint32 rows
    bytes 12-15  uint32 cols (1 for 1-D arrays)
    bytes 16-    float32 data, C order, rows * cols values
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AFB1"
HEADER = struct.Struct("<4sIII")


class BlobError(ValueError):
    pass


def encode_blob(arr) -> bytes:
    a = np.asarray(arr)
    if a.ndim not in (1, 2):
        raise BlobError(f"blobs hold 1-D or 2-D arrays, got ndim={a.ndim}")
    rows = a.shape[0]
    cols = a.shape[1] if a.ndim == 2 else 1
    return HEADER.pack(MAGIC, a.ndim, rows, cols) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_blob(data: bytes) -> np.ndarray:
    if len(data) < HEADER.size:
        raise BlobError("blob shorter than its header")
    magic, ndim, rows, cols = HEADER.unpack_from(data)
    if magic != MAGIC or ndim not in (1, 2):
        raise BlobError("bad blob header")
    if len(data) != HEADER.size + 4 * rows * cols:
        raise BlobError("blob size does not match its header")
    arr = np.frombuffer(data, dtype="<f4", offset=HEADER.size).astype(np.float32)
    return arr.reshape(rows, cols) if ndim == 2 else arr


def write_blob(path, arr) -> str:
    """Write a blob and return its sha256 hex digest."""
    data = encode_blob(arr)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_blob(path) -> np.ndarray:
    return decode_blob(Path(path).read_bytes())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Flat tensor container with a stable, documented byte layout.

Layout (all integers little-endian, data in C order):

    offset  size  field
    0       8     magic ``b"TENSORS\\0"``
    8       4     format version, u32 (currently 1)
    12      4     record count, u32
    then per record, in ascending name order:
            2     name length, u16
            var   name, UTF-8
            1     dtype code, u8 (1 = float64, 2 = float32)
            1     rank, u8
            4*r   extents, u32 each
            var   raw values, little-endian, C order

The layout is frozen: readers of version 1 will always be able to open
version-1 files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TENSORS\0"
VERSION = 1
_DTYPES = {1: "<f8", 2: "<f4"}
_CODES = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: dict) -> None:
    """Write a name -> ndarray mapping; records are sorted by name."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path) -> dict:
    """Read a container written by save_tensors."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a tensor container")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    out = {}
    pos = 16
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = np.dtype(_DTYPES.get(code))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(raw[pos : pos + nbytes], dtype=dtype).reshape(shape)
        pos += nbytes
        out[name] = data.copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return out

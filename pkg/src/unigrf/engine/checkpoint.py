"""Binary tensor container.

Layout (all integers little-endian)::

    magic      8 bytes   b"UNIGRF01"
    count      uint32    number of tensor records
    record * count:
        name_len   uint32
        name       name_len bytes, UTF-8
        rank       uint32
        extents    rank * uint64
        payload    prod(extents) * float64, row-major

Integer arrays (sequence indices) are stored as float64, which is exact
below 2**53.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from unigrf.errors import DataError

MAGIC = b"UNIGRF01"


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a tensor container (bad magic {data[:8]!r})")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(data):
                raise DataError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise DataError(f"{path}: truncated container ({exc})") from exc
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return out

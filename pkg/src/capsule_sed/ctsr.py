"""Reader/writer for the CTSR tensor file format.

Layout (all little-endian)::

    b"CTSR"  u8 version  u8 rank  u32 dims[rank]  f32 data[prod(dims)]

Data is row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTSR"
VERSION = 1


class CTSRError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    if arr.ndim > 255:
        raise CTSRError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise CTSRError("not a CTSR file (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise CTSRError(f"unsupported CTSR version {version}")
    offset = 6 + 4 * rank
    if len(buf) < offset:
        raise CTSRError("truncated CTSR header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != offset + 4 * count:
        raise CTSRError(f"CTSR payload has {len(buf) - offset} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float32).reshape(shape)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())

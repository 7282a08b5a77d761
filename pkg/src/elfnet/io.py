"""Binary serialization helpers: the ELFT tensor record.

ELFT layout: magic b"ELFT", version u32=1, rank u32, one u32 per dim,
then the payload as little-endian float64, row-major. All integers are
little-endian u32.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .exceptions import FormatError

TENSOR_MAGIC = b"ELFT"
TENSOR_VERSION = 1


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    start = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated while reading {what}", offset=start + len(buf))
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    offset = f.tell()
    magic = _read_exact(f, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", offset=offset)
    version, rank = struct.unpack("<II", _read_exact(f, 8, "tensor header"))
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset=offset + 4)
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "tensor dims"))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(f, 8 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()

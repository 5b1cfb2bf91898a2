"""``BNT1`` tensor files.

Layout: the 4 magic bytes ``BNT1``, then little-endian u32 dtype code
(1 = f32, 2 = f64, 3 = u8), u32 ndim, ndim x u64 extents and finally the raw
row-major payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"BNT1"
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
    if dt not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; expected float32, float64 or uint8")
    head = struct.pack("<II", DTYPE_CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode a tensor header+payload (without magic) at ``offset``.

    Returns the array and the offset just past its payload.
    """
    try:
        code, ndim = struct.unpack_from("<II", buf, offset)
        offset += 8
        shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
        offset += 8 * ndim
    except struct.error:
        raise TensorFormatError("truncated tensor header") from None
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dt = CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if offset + nbytes > len(buf):
        raise TensorFormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
    return arr, offset + nbytes


def save_tensor(path, t) -> None:
    data = MAGIC + encode_tensor(t)
    with open(path, "wb") as f:
        f.write(data)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic in {os.fspath(path)!r}: {buf[:4]!r}")
    arr, end = decode_tensor(buf, 4)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after payload")
    return arr

"""Writer for the SRMT tensor blob interchange format.

Layout: magic b"SRMT", version uint32=1, ndim uint32, dims uint32[ndim],
dtype uint32 (1 = float32), payload little-endian row-major. This is the
wire format the downstream matcher's file-backed semantic provider reads;
round-trips must be bit-exact.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SRMT"
VERSION = 1
DTYPE_F32 = 1


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if arr.dtype != np.float32:
        raise ValueError(f"SRMT blobs are float32, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(struct.pack("<I", DTYPE_F32))
        f.write(arr.astype("<f4", copy=False).tobytes())

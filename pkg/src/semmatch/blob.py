"""SRMT tensor blob format and checkpoint directories.

Blob layout: magic b"SRMT", version uint32=1, ndim uint32, dims uint32[ndim],
dtype uint32 (1 = float32), then the payload little-endian row-major.
Round-trips are bit-exact. Checkpoints are a directory of blobs plus a
manifest text file of `name<TAB>file<TAB>shape` lines validated on load.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SRMT"
VERSION = 1
DTYPE_F32 = 1


class BlobFormatError(ValueError):
    """Malformed or unsupported SRMT blob."""


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if arr.dtype != np.float32:
        raise BlobFormatError(f"only float32 blobs are defined, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(struct.pack("<I", DTYPE_F32))
        f.write(arr.astype("<f4", copy=False).tobytes())


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise BlobFormatError(f"bad magic {raw[:4]!r}")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise BlobFormatError(f"unsupported version {version}")
    off = 12
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    (dtype,) = struct.unpack_from("<I", raw, off)
    off += 4
    if dtype != DTYPE_F32:
        raise BlobFormatError(f"unsupported dtype code {dtype}")
    count = int(np.prod(dims)) if ndim else 1
    payload = raw[off:off + 4 * count]
    if len(payload) != 4 * count:
        raise BlobFormatError("truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _blob_name(key: str) -> str:
    return key.replace("/", "_").replace(".", "_") + ".srmt"


def save_checkpoint(directory: str | os.PathLike,
                    params: dict[str, np.ndarray]) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name in sorted(params):
        fname = _blob_name(name)
        save_tensor(os.path.join(directory, fname), params[name])
        shape = "x".join(str(d) for d in params[name].shape)
        lines.append(f"{name}\t{fname}\t{shape}")
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(directory: str | os.PathLike) -> dict[str, np.ndarray]:
    manifest = os.path.join(directory, "manifest.txt")
    if not os.path.isfile(manifest):
        raise BlobFormatError(f"no manifest in {directory}")
    params: dict[str, np.ndarray] = {}
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, fname, shape_s = line.split("\t")
            arr = load_tensor(os.path.join(directory, fname))
            expect = tuple(int(d) for d in shape_s.split("x") if d)
            if arr.shape != expect:
                raise BlobFormatError(
                    f"shape mismatch for '{name}': manifest {expect}, "
                    f"blob {arr.shape}")
            params[name] = arr
    return params

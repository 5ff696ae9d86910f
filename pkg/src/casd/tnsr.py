"""Flat binary tensor files.

Layout: magic ``TNSR1``, u32 little-endian rank, rank u32 dims, then the
float32 payload in row-major order.  Used for dataset images, proposals,
checkpoint weights and attention dumps.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR1"
_MAX_RANK = 8


def dumps_tensor(array):
    """Serialize an array to TNSR bytes (cast to float32)."""
    # note: ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(array, dtype=np.float32, order="C")
    if arr.ndim > _MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds the format limit of {_MAX_RANK}")
    parts = [MAGIC, struct.pack("<I", arr.ndim)]
    if arr.ndim:
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def loads_tensor(blob, name="<bytes>"):
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{name}: bad magic bytes")
    off = len(MAGIC)
    if len(blob) < off + 4:
        raise FormatError(f"{name}: truncated header")
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if rank > _MAX_RANK:
        raise FormatError(f"{name}: rank {rank} exceeds the format limit")
    if len(blob) < off + 4 * rank:
        raise FormatError(f"{name}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != off + 4 * count:
        raise FormatError(f"{name}: payload is {len(blob) - off} bytes, expected {4 * count}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    return data.reshape(dims).astype(np.float32, copy=True)


def save_tensor(path, array):
    with open(path, "wb") as f:
        f.write(dumps_tensor(array))


def load_tensor(path):
    with open(path, "rb") as f:
        blob = f.read()
    return loads_tensor(blob, name=str(path))

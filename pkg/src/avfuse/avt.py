"""Binary tensor container used for checkpoints, cached spectrograms and frames.

Layout: magic ``AVT1``, u32 little-endian rank, ``rank`` u32 little-endian
extents, then the row-major float32 little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVT1"
MAX_RANK = 5


class AVTError(ValueError):
    """Malformed or inconsistent AVT file."""


def write_avt(path, array) -> None:
    """Write ``array`` to ``path`` as a float32 AVT tensor."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise AVTError(f"rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if any(e < 1 for e in arr.shape):
        raise AVTError(f"all extents must be >= 1, got shape {arr.shape}")
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_avt(path) -> np.ndarray:
    """Read an AVT tensor as a float32 ndarray (row-major)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise AVTError(f"{path}: missing AVT1 magic")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank < 1 or rank > MAX_RANK:
        raise AVTError(f"{path}: rank {rank} out of range 1..{MAX_RANK}")
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise AVTError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(e < 1 for e in shape):
        raise AVTError(f"{path}: zero extent in shape {shape}")
    count = int(np.prod(shape))
    expected = offset + 4 * count
    if len(raw) != expected:
        raise AVTError(f"{path}: payload is {len(raw) - offset} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.reshape(shape).astype(np.float32)

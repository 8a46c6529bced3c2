"""VTT1 raw tensor files.

Layout: 8-byte magic ``VTTENSR1``, little-endian u32 rank, ``rank`` u32
extents, then the row-major float32 payload (little-endian).
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"VTTENSR1"


class VttFormatError(ValueError):
    pass


def to_bytes(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_bytes(blob: bytes) -> np.ndarray:
    if blob[:8] != MAGIC:
        raise VttFormatError("bad magic; not a VTT1 tensor")
    if len(blob) < 12:
        raise VttFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 8)
    end = 12 + 4 * rank
    if len(blob) < end:
        raise VttFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, 12)
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != end + 4 * count:
        raise VttFormatError(f"payload holds {(len(blob) - end) // 4} values, shape {shape} needs {count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=end).reshape(shape).astype(np.float32)


def save(path, array) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(array))
    os.replace(tmp, path)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

"""Binary array file: length-prefixed shape descriptor, then float32 payload.

Layout (all little-endian):
    uint32   ndim
    uint32   dims[ndim]
    float32  data[prod(dims)]

Used for network checkpoints (1-D parameter vectors) and externally computed
feature matrices (2-D, one row per image).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import MissingFileError, StainbenchError

_MAX_NDIM = 8


def write_array(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > _MAX_NDIM:
        raise StainbenchError(f"array rank must be 1..{_MAX_NDIM}, got {arr.ndim}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    blob = path.read_bytes()
    if len(blob) < 4:
        raise StainbenchError(f"{path}: truncated header")
    (ndim,) = struct.unpack_from("<I", blob, 0)
    if ndim < 1 or ndim > _MAX_NDIM:
        raise StainbenchError(f"{path}: implausible rank {ndim}")
    if len(blob) < 4 + 4 * ndim:
        raise StainbenchError(f"{path}: truncated shape descriptor")
    shape = struct.unpack_from(f"<{ndim}I", blob, 4)
    count = int(np.prod(shape))
    expected = 4 + 4 * ndim + 4 * count
    if len(blob) != expected:
        raise StainbenchError(
            f"{path}: expected {expected} bytes for shape {shape}, found {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=4 + 4 * ndim, count=count)
    return data.reshape(shape).astype(np.float64)

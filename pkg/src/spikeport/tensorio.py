"""Binary tensor file I/O.

The ``.tns`` container stores one dense float32 tensor:

    magic   4 bytes  b"TNS1"
    rank    uint32 little-endian
    dims    rank * uint32 little-endian
    data    prod(dims) * float32 little-endian, row-major

It is the interchange format for images, calibration batches, and probe
outputs, chosen so non-Python tooling can read and write it with plain
byte operations.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ModelFormatError

MAGIC = b"TNS1"


def write_tensor(path, array) -> None:
    """Write ``array`` as a float32 .tns file."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a .tns file; values must be finite."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 4 * count
    if len(raw) != expected:
        raise ModelFormatError(
            f"{path}: payload is {len(raw) - offset} bytes, expected {4 * count}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if not np.all(np.isfinite(data)):
        raise ModelFormatError(f"{path}: non-finite value in tensor data")
    return data.reshape(dims).copy()

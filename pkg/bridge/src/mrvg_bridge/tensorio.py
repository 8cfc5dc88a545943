"""Writer for the interchange tensor format the grounding pipeline reads.

Layout: magic "MRVG", u32 LE version (1), u32 dtype code (0 = float32),
u32 ndim, ndim x u64 dims, raw little-endian payload. Writes are atomic.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MRVG"
VERSION = 1
DTYPE_FLOAT32 = 0


def write_tensor(shape, data, path) -> Path:
    shape = tuple(int(s) for s in shape)
    arr = np.ascontiguousarray(np.asarray(data, dtype="<f4").reshape(-1))
    expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if arr.size != expected:
        raise ValueError(f"shape {shape} implies {expected} values, got {arr.size}")
    header = MAGIC + struct.pack("<III", VERSION, DTYPE_FLOAT32, len(shape))
    if shape:
        header += struct.pack(f"<{len(shape)}Q", *shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def mask_to_rle(mask: np.ndarray) -> dict:
    """Row-major RLE of a boolean mask, as the manifest schema expects."""
    arr = np.asarray(mask, dtype=bool)
    flat = arr.reshape(-1)
    edges = np.diff(np.concatenate(([0], flat.view(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    runs = []
    for s, e in zip(starts, ends):
        runs.extend((int(s), int(e - s)))
    return {"width": int(arr.shape[1]), "height": int(arr.shape[0]), "runs": runs}

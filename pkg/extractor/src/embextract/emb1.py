"""Writer for the EMB1 embedding file format.

Layout (little-endian): magic "EMB1", u8 version = 1, u32 n, u32 d,
u8 label_flag, n*d float64 row-major data, then n int32 labels when flagged.
float32 activations are widened to float64 here so there is exactly one
on-disk precision.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_MAGIC = b"EMB1"
_VERSION = 1
_HEADER = struct.Struct("<4sBIIB")


def write_emb1(data: np.ndarray, destination, labels: np.ndarray | None = None) -> None:
    """Write one EMB1 file atomically (temp file + rename)."""
    data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError(f"need a non-empty 2-D matrix, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("refusing to write non-finite values")
    n, d = data.shape
    flag = 0
    tail = b""
    if labels is not None:
        labels = np.asarray(labels).reshape(-1)
        if labels.shape[0] != n:
            raise ValueError(f"labels length {labels.shape[0]} != n={n}")
        flag = 1
        tail = labels.astype("<i4").tobytes()
    dest = Path(destination)
    fd, tmp = tempfile.mkstemp(dir=dest.parent or Path("."), suffix=".emb.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, n, d, flag))
            fh.write(data.astype("<f8").tobytes())
            fh.write(tail)
        os.replace(tmp, dest)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

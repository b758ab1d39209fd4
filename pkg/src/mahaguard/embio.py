"""Embedding datasets and their on-disk formats.

Binary layout ("EMB1", little-endian throughout):

    magic       4 bytes   b"EMB1"
    version     u8        1
    n           u32
    d           u32
    label_flag  u8        0 or 1
    data        n*d float64, row-major
    labels      n int32   (present only when label_flag == 1)

This file layout is the contract shared with the feature extractor; golden
files under ``tests/golden/`` pin it.  A read-only CSV fallback accepts
rectangular numeric rows with an optional trailing integer label column.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    IoError,
    LabelOutOfRange,
    NonFiniteValue,
    ParseError,
    RaggedRows,
    TruncatedFile,
    UnsupportedVersion,
    ValidationError,
)

_MAGIC = b"EMB1"
_VERSION = 1
_HEADER = struct.Struct("<4sBIIB")


@dataclass
class EmbeddingSet:
    """An n x d matrix of feature vectors with optional integer class labels."""

    data: np.ndarray
    labels: np.ndarray | None = None
    source_tag: str = ""

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.ndim == 1:
            data = data.reshape(-1, 1)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(
                f"embedding data must be a non-empty 2-D matrix, got shape {np.shape(self.data)}"
            )
        if not np.isfinite(data).all():
            raise NonFiniteValue("embedding data contains NaN or Inf")
        self.data = data
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim != 1 or labels.shape[0] != data.shape[0]:
                raise DimensionMismatch(
                    f"labels length {labels.shape} does not match n={data.shape[0]}"
                )
            if not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.floor(labels)):
                    raise LabelOutOfRange("labels must be integers")
            labels = labels.astype(np.int32)
            if (labels < 0).any():
                raise LabelOutOfRange("labels must be non-negative")
            self.labels = labels

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def num_classes(self) -> int:
        """K implied by the labels (max label + 1)."""
        if self.labels is None:
            raise ValidationError(f"embedding set {self.source_tag!r} carries no labels")
        return int(self.labels.max()) + 1


def write_emb(emb: EmbeddingSet, destination) -> None:
    """Write ``emb`` in the EMB1 format, atomically (temp file + rename)."""
    dest = Path(destination)
    if not np.isfinite(emb.data).all():
        raise NonFiniteValue("refusing to write non-finite embedding data")
    flag = 1 if emb.labels is not None else 0
    header = _HEADER.pack(_MAGIC, _VERSION, emb.n, emb.dim, flag)
    payload = np.ascontiguousarray(emb.data, dtype="<f8").tobytes()
    tail = emb.labels.astype("<i4").tobytes() if flag else b""
    try:
        fd, tmp = tempfile.mkstemp(dir=dest.parent or Path("."), suffix=".emb.tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(header)
                fh.write(payload)
                fh.write(tail)
            os.replace(tmp, dest)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {dest}: {exc}") from exc


def read_emb(source) -> EmbeddingSet:
    """Read an EMB1 file, validating magic, version, payload size, and finiteness."""
    path = Path(source)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise TruncatedFile(
            f"{path}: expected at least {_HEADER.size} header bytes, found {len(raw)}"
        )
    magic, version, n, d, flag = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise UnsupportedVersion(f"{path}: unsupported version {version}")
    if flag not in (0, 1):
        raise UnsupportedVersion(f"{path}: invalid label flag {flag}")
    expected = n * d * 8 + (n * 4 if flag else 0)
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise TruncatedFile(f"{path}: expected {expected} payload bytes, found {actual}")
    data = np.frombuffer(raw, dtype="<f8", count=n * d, offset=_HEADER.size)
    data = data.reshape(n, d).copy()
    labels = None
    if flag:
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=_HEADER.size + n * d * 8).copy()
        if (labels < 0).any():
            raise LabelOutOfRange(f"{path}: negative label in file")
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"{path}: payload contains NaN or Inf")
    return EmbeddingSet(data=data, labels=labels, source_tag=str(path))


def read_csv(source, has_labels: bool = False) -> EmbeddingSet:
    """Read a rectangular numeric CSV; when ``has_labels`` the last column is an int label."""
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if width is None:
            width = len(fields)
            if has_labels and width < 2:
                raise RaggedRows(lineno, f"line {lineno}: need data columns before the label")
        elif len(fields) != width:
            raise RaggedRows(lineno)
        if has_labels:
            data_fields, label_field = fields[:-1], fields[-1]
        else:
            data_fields, label_field = fields, None
        row = []
        for col, raw_field in enumerate(data_fields, start=1):
            try:
                row.append(float(raw_field.strip()))
            except ValueError:
                raise ParseError(lineno, col) from None
        rows.append(row)
        if label_field is not None:
            try:
                labels.append(int(label_field.strip()))
            except ValueError:
                raise ParseError(lineno, width) from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    return EmbeddingSet(
        data=data,
        labels=np.array(labels, dtype=np.int32) if has_labels else None,
        source_tag=str(path),
    )

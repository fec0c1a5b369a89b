"""Row-major binary matrix files.

Layout, little-endian: 8-byte magic ``XVRMAT01``, uint32 rows, uint32 cols,
uint32 element width in bytes (always 8), then rows*cols float64 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"XVRMAT01"
_HEADER = struct.Struct("<8sIII")


class MatrixFormatError(ValueError):
    pass


def write_matrix(path, matrix: np.ndarray) -> Path:
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, matrix.shape[0], matrix.shape[1], 8))
        fh.write(matrix.tobytes(order="C"))
    return path


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise MatrixFormatError(f"{path}: file shorter than the header")
    magic, rows, cols, width = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {magic!r}")
    if width != 8:
        raise MatrixFormatError(f"{path}: unsupported element width {width}")
    expected = _HEADER.size + rows * cols * width
    if len(data) != expected:
        raise MatrixFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)

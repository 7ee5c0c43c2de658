"""Binary file formats (all little-endian).

Common 12-byte header::

    magic  4s   b"CSRE"
    version u32 (=1)
    dtype  u8   1 = f32 payload, 2 = u32 payload
    kind   u8   0 = dense, 1 = sparse, 2 = labels
    pad    2 bytes

Dense:  u64 rows, u64 cols, f32[rows*cols] row-major.
Sparse: u64 rows, u64 cols, u64 nnz, u64 indptr[rows+1], u32 indices[nnz], f32 values[nnz].
Labels: u64 rows, u32[rows].

Model checkpoints use their own header: b"CSRM", u32 version, u64 d, u64 h,
then W_enc (h*d f32), b_enc (h f32), b_pre (d f32).

Writers are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core import SparseMatrixCSR, as_dense

MAGIC = b"CSRE"
MODEL_MAGIC = b"CSRM"
VERSION = 1
MODEL_VERSION = 1

DTYPE_F32 = 1
DTYPE_U32 = 2

KIND_DENSE = 0
KIND_SPARSE = 1
KIND_LABELS = 2

_HEADER = struct.Struct("<4sIBB2x")
_U64 = struct.Struct("<Q")

# guards against absurd header dimensions before any allocation
_MAX_ELEMS = 1 << 40


class FormatError(ValueError):
    """Raised for malformed, truncated or incompatible files."""


def _atomic_write(path, chunks) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            for c in chunks:
                f.write(c)
        # mkstemp creates 0600; give the file the permissions open() would
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def array(self, dtype, count: int) -> np.ndarray:
        if count > _MAX_ELEMS:
            raise FormatError(f"{self.path}: dimension overflow ({count} elements)")
        dt = np.dtype(dtype)
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).copy()

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def _open(path) -> _Reader:
    return _Reader(Path(path).read_bytes(), path)


def _header(kind: int, dtype: int = DTYPE_F32) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, dtype, kind)


def read_header(r: _Reader) -> tuple[int, int]:
    """Validate the common header; return ``(dtype, kind)``."""
    magic, version, dtype, kind = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise FormatError(f"{r.path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{r.path}: unsupported version {version}")
    return dtype, kind


def _expect(r: _Reader, kind: int, dtype: int) -> None:
    got_dtype, got_kind = read_header(r)
    if got_kind != kind:
        raise FormatError(f"{r.path}: expected kind {kind}, found {got_kind}")
    if got_dtype != dtype:
        raise FormatError(f"{r.path}: unsupported dtype code {got_dtype}")


def _dims(r: _Reader, *names) -> list[int]:
    vals = [r.u64() for _ in names]
    total = 1
    for v in vals:
        total *= max(v, 1)
        if total > _MAX_ELEMS:
            raise FormatError(f"{r.path}: dimension overflow")
    return vals


def file_kind(path) -> int:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
    if len(head) >= 4 and head[:4] == MODEL_MAGIC:
        return -1
    r = _Reader(head, path)
    return read_header(r)[1]


def save_dense(m, path) -> None:
    m = as_dense(m)
    rows, cols = m.shape
    _atomic_write(path, [_header(KIND_DENSE), _U64.pack(rows), _U64.pack(cols), m.astype("<f4").tobytes()])


def load_dense(path) -> np.ndarray:
    r = _open(path)
    _expect(r, KIND_DENSE, DTYPE_F32)
    rows, cols = _dims(r, "rows", "cols")
    data = r.array("<f4", rows * cols)
    r.finish()
    return data.astype(np.float32).reshape(rows, cols)


def save_sparse(m: SparseMatrixCSR, path) -> None:
    if m.cols > 0xFFFFFFFF:
        raise FormatError("column count does not fit u32 indices")
    _atomic_write(
        path,
        [
            _header(KIND_SPARSE),
            _U64.pack(m.rows),
            _U64.pack(m.cols),
            _U64.pack(m.nnz),
            m.indptr.astype("<u8").tobytes(),
            m.indices.astype("<u4").tobytes(),
            m.values.astype("<f4").tobytes(),
        ],
    )


def load_sparse(path) -> SparseMatrixCSR:
    r = _open(path)
    _expect(r, KIND_SPARSE, DTYPE_F32)
    rows, cols, nnz = _dims(r, "rows", "cols", "nnz")
    indptr = r.array("<u8", rows + 1).astype(np.int64)
    indices = r.array("<u4", nnz).astype(np.int64)
    values = r.array("<f4", nnz).astype(np.float32)
    r.finish()
    try:
        return SparseMatrixCSR(rows, cols, indptr, indices, values)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_labels(labels, path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() > 0xFFFFFFFF)):
        raise ValueError("labels must be a 1-D array of u32 values")
    _atomic_write(path, [_header(KIND_LABELS, DTYPE_U32), _U64.pack(labels.size), labels.astype("<u4").tobytes()])


def load_labels(path) -> np.ndarray:
    r = _open(path)
    _expect(r, KIND_LABELS, DTYPE_U32)
    (rows,) = _dims(r, "rows")
    out = r.array("<u4", rows).astype(np.int64)
    r.finish()
    return out


def save_model_arrays(W_enc, b_enc, b_pre, path) -> None:
    h, d = W_enc.shape
    _atomic_write(
        path,
        [
            struct.pack("<4sI", MODEL_MAGIC, MODEL_VERSION),
            _U64.pack(d),
            _U64.pack(h),
            np.asarray(W_enc, dtype="<f4").tobytes(),
            np.asarray(b_enc, dtype="<f4").tobytes(),
            np.asarray(b_pre, dtype="<f4").tobytes(),
        ],
    )


def load_model_arrays(path):
    r = _open(path)
    magic, version = struct.unpack("<4sI", r.take(8))
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    d, h = _dims(r, "d", "h")
    W = r.array("<f4", h * d).astype(np.float32).reshape(h, d)
    b_enc = r.array("<f4", h).astype(np.float32)
    b_pre = r.array("<f4", d).astype(np.float32)
    r.finish()
    return W, b_enc, b_pre

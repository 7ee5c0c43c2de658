"""Dense and sparse primitives shared by the model, index and benchmark code.

Dense matrices are plain 2-D ``float32`` numpy arrays (rows are samples).
Sparse codes are :class:`SparseVector` for a single embedding and
:class:`SparseMatrixCSR` for a corpus.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels

DenseMatrix = np.ndarray


class DimensionMismatch(ValueError):
    pass


def as_dense(x, *, copy: bool = False) -> np.ndarray:
    """Validate and coerce ``x`` into a finite 2-D float32 matrix."""
    arr = np.array(x, dtype=np.float32, copy=copy) if copy else np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite entries")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True, eq=False)
class SparseVector:
    """A non-negative sparse vector with strictly increasing indices."""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        val = np.ascontiguousarray(self.values, dtype=np.float32)
        if idx.ndim != 1 or val.ndim != 1 or idx.shape != val.shape:
            raise ValueError("indices and values must be 1-D and equally long")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise ValueError("index out of range")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly increasing")
            if np.any(~(val > 0)):
                raise ValueError("sparse values must be strictly positive")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @classmethod
    def empty(cls, dim: int) -> "SparseVector":
        return cls(dim, np.empty(0, np.int64), np.empty(0, np.float32))

    @classmethod
    def from_dense(cls, x) -> "SparseVector":
        """Keep the strictly positive entries of a dense vector."""
        x = np.asarray(x, dtype=np.float32)
        idx = np.flatnonzero(x > 0)
        return cls(x.size, idx, x[idx])

    @classmethod
    def from_dict(cls, dim: int, entries: dict) -> "SparseVector":
        keys = sorted(k for k, v in entries.items() if v > 0)
        return cls(dim, np.array(keys, np.int64), np.array([entries[k] for k in keys], np.float32))

    def to_dense(self, dtype=np.float32) -> np.ndarray:
        out = np.zeros(self.dim, dtype=dtype)
        out[self.indices] = self.values
        return out

    def sq_norm(self) -> float:
        v = self.values.astype(np.float64)
        return float(v @ v)

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        body = ", ".join(f"{i}:{v:g}" for i, v in zip(self.indices.tolist(), self.values.tolist()))
        return f"SparseVector(dim={self.dim}, {{{body}}})"


@dataclass(frozen=True, eq=False)
class SparseMatrixCSR:
    """Row-compressed store of sparse codes (rows x cols)."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if indptr.shape != (self.rows + 1,):
            raise ValueError("indptr must have rows+1 entries")
        if indptr[0] != 0 or indptr[-1] != indices.size or indices.size != values.size:
            raise ValueError("indptr does not match indices/values length")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if indices.size:
            if indices.min() < 0 or indices.max() >= self.cols:
                raise ValueError("column index out of range")
            # strictly increasing inside each row: a non-increase is only
            # allowed where a new row starts
            step = np.diff(indices) <= 0
            if np.any(step):
                boundary = np.zeros(indices.size - 1, dtype=bool)
                starts = indptr[1:-1]
                starts = starts[(starts > 0) & (starts < indices.size)]
                boundary[starts - 1] = True
                if np.any(step & ~boundary):
                    raise ValueError("column indices must be strictly increasing within a row")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def row(self, i: int) -> SparseVector:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return SparseVector(self.cols, self.indices[lo:hi], self.values[lo:hi])

    def to_rows(self) -> list[SparseVector]:
        return [self.row(i) for i in range(self.rows)]

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.indptr)

    @classmethod
    def from_rows(cls, rows: Sequence[SparseVector], cols: int | None = None) -> "SparseMatrixCSR":
        rows = list(rows)
        if cols is None:
            if not rows:
                raise ValueError("cols is required for an empty row list")
            cols = rows[0].dim
        for r in rows:
            if r.dim != cols:
                raise DimensionMismatch(f"row dim {r.dim} != {cols}")
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([r.nnz for r in rows])
        indices = np.concatenate([r.indices for r in rows]) if rows else np.empty(0, np.int64)
        values = np.concatenate([r.values for r in rows]) if rows else np.empty(0, np.float32)
        return cls(len(rows), cols, indptr, indices, values)

    @classmethod
    def from_dense(cls, x) -> "SparseMatrixCSR":
        x = np.asarray(x, dtype=np.float32)
        mask = x > 0
        indptr = np.zeros(x.shape[0] + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(mask.sum(axis=1))
        r, c = np.nonzero(mask)
        return cls(x.shape[0], x.shape[1], indptr, c, x[r, c])

    def to_dense(self, dtype=np.float32) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=dtype)
        row_of = np.repeat(np.arange(self.rows), np.diff(self.indptr))
        out[row_of, self.indices] = self.values
        return out

    def take(self, rows: Iterable[int]) -> "SparseMatrixCSR":
        return SparseMatrixCSR.from_rows([self.row(int(i)) for i in rows], cols=self.cols)

    def __eq__(self, other):
        if not isinstance(other, SparseMatrixCSR):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def top_k_select(x, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of ``x``, sorted ascending.

    Ties are resolved in favour of the lower index, so the result depends
    only on the values. ``k`` larger than ``len(x)`` selects everything.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x)
    return np.flatnonzero(top_k_mask(x[None, :], k)[0])


def top_k_mask(a: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the row-wise top ``k`` entries of a 2-D array.

    Runs in O(rows * cols): a partition finds each row's k-th largest value,
    everything strictly above it is kept, and the remaining slots go to the
    lowest-index entries equal to it.
    """
    a = np.asarray(a)
    n, h = a.shape
    if k >= h:
        return np.ones((n, h), dtype=bool)
    kth = -np.partition(-a, k - 1, axis=1)[:, k - 1 : k]
    above = a > kth
    need = k - above.sum(axis=1, keepdims=True)
    tied = a == kth
    return above | (tied & (np.cumsum(tied, axis=1) <= need))


def sparse_dot(a: SparseVector, b: SparseVector) -> tuple[float, int]:
    """Inner product of two sparse vectors and the multiplications it took."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"{a.dim} != {b.dim}")
    val, mults = _kernels.sparse_dot(a.indices, a.values, b.indices, b.values)
    return float(val), int(mults)


def sparse_dense_matvec(m: SparseMatrixCSR, q: SparseVector) -> tuple[np.ndarray, int]:
    """Row-wise inner products ``m @ q`` (float64) plus the multiplication count.

    Works by a per-row sorted merge, so row ``i`` of the result is exactly
    ``sparse_dot(m.row(i), q)``.
    """
    if m.cols != q.dim:
        raise DimensionMismatch(f"{m.cols} != {q.dim}")
    out = np.zeros(m.rows, dtype=np.float64)
    mults = _kernels.csr_matvec(m.indptr, m.indices, m.values, q.indices, q.values, m.cols, out)
    return out, int(mults)

"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature. The compiled
path is used unless numba is missing or ``CSR_EMBED_DISABLE_NUMBA`` is set
to a truthy value before import. Both paths are always importable as
``numpy_<name>`` / ``numba_<name>`` so tests and benchmarks can compare them.

All accumulation is float64; multiplication counts are exact integers.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("CSR_EMBED_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLE


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def numpy_sparse_dot(a_idx, a_val, b_idx, b_val):
    _, ia, ib = np.intersect1d(a_idx, b_idx, assume_unique=True, return_indices=True)
    if ia.size == 0:
        return 0.0, 0
    prod = a_val[ia].astype(np.float64) * b_val[ib].astype(np.float64)
    # sequential sum keeps agreement with the compiled merge loop
    total = 0.0
    for p in prod:
        total += p
    return float(total), int(ia.size)


def numpy_csr_matvec(indptr, indices, values, q_idx, q_val, dim, out):
    """out[i] = <row_i, q>; returns the number of multiplications."""
    qdense = np.zeros(dim, dtype=np.float64)
    qdense[q_idx] = q_val
    hit = np.zeros(dim, dtype=bool)
    hit[q_idx] = True
    out[:] = 0.0
    if indices.size == 0:
        return 0
    contrib = values.astype(np.float64) * qdense[indices]
    row_of = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
    np.add.at(out, row_of, contrib)
    return int(np.count_nonzero(hit[indices]))


def numpy_scatter_postings(post_ptr, post_rows, post_vals, q_idx, q_val, out):
    """Accumulate q's contribution into ``out`` through the inverted lists."""
    mults = 0
    for j, qv in zip(q_idx, q_val):
        lo, hi = post_ptr[j], post_ptr[j + 1]
        if hi == lo:
            continue
        # rows inside one posting list are unique, so fancy += is safe
        out[post_rows[lo:hi]] += np.float64(qv) * post_vals[lo:hi].astype(np.float64)
        mults += int(hi - lo)
    return mults


def numpy_posting_mults(post_ptr, q_ptr, q_idx):
    """Postings touched per query for a CSR batch of queries."""
    lengths = np.diff(post_ptr)
    per_nnz = lengths[q_idx].astype(np.int64)
    out = np.zeros(q_ptr.size - 1, dtype=np.int64)
    row_of = np.repeat(np.arange(q_ptr.size - 1), np.diff(q_ptr))
    np.add.at(out, row_of, per_nnz)
    return out


# --------------------------------------------------------------------------
# compiled path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def numba_sparse_dot(a_idx, a_val, b_idx, b_val):
        i = 0
        j = 0
        total = 0.0
        mults = 0
        na = a_idx.shape[0]
        nb = b_idx.shape[0]
        while i < na and j < nb:
            ai = a_idx[i]
            bj = b_idx[j]
            if ai == bj:
                total += np.float64(a_val[i]) * np.float64(b_val[j])
                mults += 1
                i += 1
                j += 1
            elif ai < bj:
                i += 1
            else:
                j += 1
        return total, mults

    @njit(cache=True, nogil=True)
    def numba_csr_matvec(indptr, indices, values, q_idx, q_val, dim, out):
        # dense lookup of the query beats a per-row merge: no branches on
        # the index comparison, one pass over the corpus non-zeros
        qdense = np.zeros(dim, dtype=np.float64)
        hit = np.zeros(dim, dtype=np.bool_)
        for t in range(q_idx.shape[0]):
            qdense[q_idx[t]] = q_val[t]
            hit[q_idx[t]] = True
        mults = 0
        for r in range(indptr.shape[0] - 1):
            acc = 0.0
            for i in range(indptr[r], indptr[r + 1]):
                c = indices[i]
                if hit[c]:
                    acc += np.float64(values[i]) * qdense[c]
                    mults += 1
            out[r] = acc
        return mults

    @njit(cache=True, nogil=True)
    def numba_scatter_postings(post_ptr, post_rows, post_vals, q_idx, q_val, out):
        mults = 0
        for t in range(q_idx.shape[0]):
            j = q_idx[t]
            qv = np.float64(q_val[t])
            lo = post_ptr[j]
            hi = post_ptr[j + 1]
            for p in range(lo, hi):
                out[post_rows[p]] += qv * np.float64(post_vals[p])
            mults += hi - lo
        return mults

    @njit(cache=True, nogil=True)
    def numba_posting_mults(post_ptr, q_ptr, q_idx):
        nq = q_ptr.shape[0] - 1
        out = np.zeros(nq, dtype=np.int64)
        for r in range(nq):
            s = 0
            for t in range(q_ptr[r], q_ptr[r + 1]):
                j = q_idx[t]
                s += post_ptr[j + 1] - post_ptr[j]
            out[r] = s
        return out

else:  # pragma: no cover
    numba_sparse_dot = numpy_sparse_dot
    numba_csr_matvec = numpy_csr_matvec
    numba_scatter_postings = numpy_scatter_postings
    numba_posting_mults = numpy_posting_mults


if USE_NUMBA:
    sparse_dot = numba_sparse_dot
    csr_matvec = numba_csr_matvec
    scatter_postings = numba_scatter_postings
    posting_mults = numba_posting_mults
else:
    sparse_dot = numpy_sparse_dot
    csr_matvec = numpy_csr_matvec
    scatter_postings = numpy_scatter_postings
    posting_mults = numpy_posting_mults


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"

"""Exact nearest-neighbour search over sparse codes and truncated dense embeddings.

Sparse search scatters each query non-zero through a column-wise inverted
index into a dense per-query score buffer, so the work is exactly the number
of postings touched. Rows sharing no coordinate with the query keep score 0
and still take part in the ranking; under L2 their distance comes from the
precomputed norms alone.

Scores: inner product (higher is better) or squared L2 distance (lower is
better). Ties are always broken by the lower row id.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .core import DimensionMismatch, SparseMatrixCSR, SparseVector

METRICS = ("l2", "ip")


def _check_metric(metric: str) -> str:
    m = metric.lower()
    if m in ("l2", "L2"):
        return "l2"
    if m in ("ip", "inner_product", "innerproduct"):
        return "ip"
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


@dataclass(frozen=True)
class SparseIndex:
    corpus: SparseMatrixCSR
    sq_norms: np.ndarray
    post_ptr: np.ndarray  # (h+1,)
    post_rows: np.ndarray
    post_vals: np.ndarray
    ids: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.corpus.rows

    @property
    def dim(self) -> int:
        return self.corpus.cols

    def postings(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.post_ptr[j], self.post_ptr[j + 1]
        return self.post_rows[lo:hi], self.post_vals[lo:hi]


@dataclass(frozen=True)
class DenseIndex:
    corpus: np.ndarray  # (N, m) float32
    sq_norms: np.ndarray
    ids: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.corpus.shape[0]

    @property
    def dim(self) -> int:
        return self.corpus.shape[1]


@dataclass
class SearchResult:
    """Batch search output; rows of ``ids``/``scores`` are padded with -1/nan when N < n."""

    ids: np.ndarray
    scores: np.ndarray
    mults: np.ndarray

    @property
    def total_mults(self) -> int:
        return int(self.mults.sum())


def _row_sq_norms(m: SparseMatrixCSR) -> np.ndarray:
    # sequential per-row accumulation in index order: the same order the
    # scatter kernel uses, so a row queried against itself gives distance 0
    out = np.zeros(m.rows, dtype=np.float64)
    row_of = np.repeat(np.arange(m.rows), m.row_nnz())
    v = m.values.astype(np.float64)
    np.add.at(out, row_of, v * v)
    return out


def build_sparse_index(codes: SparseMatrixCSR, ids=None) -> SparseIndex:
    order = np.argsort(codes.indices, kind="stable")
    row_of = np.repeat(np.arange(codes.rows, dtype=np.int64), codes.row_nnz())
    counts = np.bincount(codes.indices, minlength=codes.cols)
    post_ptr = np.zeros(codes.cols + 1, dtype=np.int64)
    np.cumsum(counts, out=post_ptr[1:])
    if ids is not None:
        ids = np.asarray(ids)
        if ids.shape != (codes.rows,):
            raise ValueError("ids must have one entry per corpus row")
    return SparseIndex(
        corpus=codes,
        sq_norms=_row_sq_norms(codes),
        post_ptr=post_ptr,
        post_rows=np.ascontiguousarray(row_of[order]),
        post_vals=np.ascontiguousarray(codes.values[order]),
        ids=ids,
    )


def build_dense_index(embeddings, m: Optional[int] = None, ids=None) -> DenseIndex:
    """Keep the first ``m`` coordinates of each embedding (all when ``m`` is None)."""
    emb = np.asarray(embeddings, dtype=np.float32)
    if emb.ndim != 2:
        raise ValueError("expected a 2-D embedding matrix")
    if m is not None:
        if not 1 <= m <= emb.shape[1]:
            raise ValueError(f"m must be in [1, {emb.shape[1]}]")
        emb = emb[:, :m]
    corpus = np.ascontiguousarray(emb)
    c64 = corpus.astype(np.float64)
    return DenseIndex(corpus, np.einsum("ij,ij->i", c64, c64), None if ids is None else np.asarray(ids))


def select_top(keys: np.ndarray, n: int) -> np.ndarray:
    """Positions of the ``n`` smallest keys ordered by (key, position)."""
    N = keys.size
    if n >= N:
        return np.lexsort((np.arange(N), keys))
    kth = np.partition(keys, n - 1)[n - 1]
    cand = np.flatnonzero(keys <= kth)
    return cand[np.lexsort((cand, keys[cand]))][:n]


def _keys(scores: np.ndarray, q_sq: float, norms: np.ndarray, metric: str) -> np.ndarray:
    if metric == "ip":
        return -scores
    d = q_sq + norms - 2.0 * scores
    np.maximum(d, 0.0, out=d)
    return d


def _to_score(keys: np.ndarray, metric: str) -> np.ndarray:
    return -keys if metric == "ip" else keys


def _query_sq_norm(q_val: np.ndarray) -> float:
    acc = np.zeros(1)
    v = q_val.astype(np.float64)
    np.add.at(acc, np.zeros(v.size, dtype=np.int64), v * v)
    return float(acc[0])


def _sparse_one(index: SparseIndex, q_idx, q_val, n: int, metric: str, buf: np.ndarray):
    buf[:] = 0.0
    mults = _kernels.scatter_postings(index.post_ptr, index.post_rows, index.post_vals, q_idx, q_val, buf)
    keys = _keys(buf, _query_sq_norm(q_val), index.sq_norms, metric)
    top = select_top(keys, n)
    return top, _to_score(keys[top], metric), int(mults)


def knn(index: SparseIndex, q: SparseVector, n: int, metric: str = "l2") -> tuple[list[tuple[int, float]], int]:
    """Exact top-``n`` rows for one sparse query, plus postings touched."""
    metric = _check_metric(metric)
    if n < 1:
        raise ValueError("n must be >= 1")
    if q.dim != index.dim:
        raise DimensionMismatch(f"query dim {q.dim} != index dim {index.dim}")
    if index.size == 0:
        return [], 0
    buf = np.zeros(index.size, dtype=np.float64)
    top, scores, mults = _sparse_one(index, q.indices, q.values, n, metric, buf)
    return list(zip(top.tolist(), scores.tolist())), mults


def _shards(q: int, threads: int) -> list[range]:
    threads = max(1, min(threads, q)) if q else 1
    step = -(-q // threads) if q else 1
    return [range(lo, min(lo + step, q)) for lo in range(0, q, step)]


def _run_sharded(fn, nq: int, threads: int):
    shards = _shards(nq, threads)
    if len(shards) <= 1:
        for s in shards:
            fn(s)
        return
    with ThreadPoolExecutor(max_workers=len(shards)) as ex:
        list(ex.map(fn, shards))


def knn_batch(
    index: SparseIndex, queries: SparseMatrixCSR, n: int, metric: str = "l2", threads: int = 1
) -> SearchResult:
    """Search every row of ``queries``; results are independent of ``threads``."""
    metric = _check_metric(metric)
    if n < 1:
        raise ValueError("n must be >= 1")
    if queries.cols != index.dim:
        raise DimensionMismatch(f"query dim {queries.cols} != index dim {index.dim}")
    nq = queries.rows
    width = min(n, index.size)
    ids = np.full((nq, width), -1, dtype=np.int64)
    scores = np.full((nq, width), np.nan)
    mults = np.zeros(nq, dtype=np.int64)
    if index.size == 0:
        return SearchResult(ids, scores, mults)

    def work(rows: range):
        buf = np.zeros(index.size, dtype=np.float64)
        for r in rows:
            lo, hi = queries.indptr[r], queries.indptr[r + 1]
            top, sc, m = _sparse_one(index, queries.indices[lo:hi], queries.values[lo:hi], n, metric, buf)
            ids[r], scores[r], mults[r] = top, sc, m

    _run_sharded(work, nq, threads)
    return SearchResult(ids, scores, mults)


def knn_dense(index: DenseIndex, q, n: int, metric: str = "l2") -> tuple[list[tuple[int, float]], int]:
    res = knn_dense_batch(index, np.asarray(q)[None, :], n, metric)
    return list(zip(res.ids[0].tolist(), res.scores[0].tolist())), int(res.mults[0])


def knn_dense_batch(
    index: DenseIndex,
    queries,
    n: int,
    metric: str = "l2",
    threads: int = 1,
    chunk_rows: int = 8192,
) -> SearchResult:
    """Exhaustive float64 scan in corpus chunks; every query costs ``N * m`` multiplications."""
    metric = _check_metric(metric)
    if n < 1:
        raise ValueError("n must be >= 1")
    Q = np.asarray(queries, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[1] != index.dim:
        raise DimensionMismatch(f"queries must have {index.dim} columns")
    nq, N = Q.shape[0], index.size
    width = min(n, N)
    mults = np.full(nq, N * index.dim, dtype=np.int64)
    if N == 0:
        return SearchResult(np.full((nq, 0), -1, np.int64), np.full((nq, 0), np.nan), mults)
    q_sq = np.einsum("ij,ij->i", Q, Q)
    cand_ids = [[] for _ in range(nq)]
    cand_keys = [[] for _ in range(nq)]

    for lo in range(0, N, chunk_rows):
        block = index.corpus[lo : lo + chunk_rows].astype(np.float64)
        S = Q @ block.T
        norms = index.sq_norms[lo : lo + chunk_rows]

        def work(rows: range, S=S, norms=norms, lo=lo):
            for r in rows:
                keys = _keys(S[r], q_sq[r], norms, metric)
                top = select_top(keys, width)
                cand_ids[r].append(top + lo)
                cand_keys[r].append(keys[top])

        _run_sharded(work, nq, threads)

    ids = np.empty((nq, width), dtype=np.int64)
    scores = np.empty((nq, width))
    for r in range(nq):
        ci = np.concatenate(cand_ids[r])
        ck = np.concatenate(cand_keys[r])
        order = np.lexsort((ci, ck))[:width]
        ids[r] = ci[order]
        scores[r] = _to_score(ck[order], metric)
    return SearchResult(ids, scores, mults)


def one_nn_accuracy(
    train_codes,
    train_labels,
    query_codes,
    query_labels,
    metric: str = "l2",
    exclude_self: bool = False,
    threads: int = 1,
) -> float:
    """Fraction of queries whose nearest corpus row carries the same label.

    Codes are either :class:`SparseMatrixCSR` (sparse index) or dense 2-D
    arrays (exhaustive scan). With ``exclude_self`` the query set is the
    corpus itself and query ``i`` may not retrieve row ``i``.
    """
    train_labels = np.asarray(train_labels)
    query_labels = np.asarray(query_labels)
    sparse = isinstance(train_codes, SparseMatrixCSR)
    n_train = train_codes.rows if sparse else np.asarray(train_codes).shape[0]
    n_query = query_codes.rows if isinstance(query_codes, SparseMatrixCSR) else np.asarray(query_codes).shape[0]
    if n_train == 0:
        raise ValueError("empty corpus")
    if train_labels.shape != (n_train,) or query_labels.shape != (n_query,):
        raise ValueError("labels must align with code rows")
    if exclude_self and n_train != n_query:
        raise ValueError("exclude_self requires the query set to be the corpus")
    if n_query == 0:
        return 0.0
    want = 2 if exclude_self else 1
    if sparse:
        res = knn_batch(build_sparse_index(train_codes), query_codes, want, metric, threads)
    else:
        res = knn_dense_batch(build_dense_index(train_codes), query_codes, want, metric, threads)
    nn = res.ids[:, 0].copy()
    if exclude_self:
        if n_train == 1:
            return 0.0
        is_self = nn == np.arange(n_query)
        nn[is_self] = res.ids[is_self, 1]
    return float(np.mean(train_labels[nn] == query_labels))

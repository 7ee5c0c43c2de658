"""Benchmark harness and fidelity metrics.

Retrieval cost is reported two ways: wall-clock latency per query batch and
the exact number of value multiplications. For uniform random k-sparse
supports over ``h`` latents the expected overlap of two codes is ``k*k/h``,
so a batch of ``Q`` queries against ``N`` rows costs about ``Q*N*k*k/h``
multiplications, against ``Q*N*m`` for a length-``m`` dense scan.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .core import SparseMatrixCSR
from .index import (
    build_dense_index,
    build_sparse_index,
    knn_batch,
    knn_dense_batch,
    one_nn_accuracy,
)
from .model import SaeModel, _codes_from_pre, encode_batch, pre_activations
from .synthetic import random_dense, random_sparse

DEFAULT_MEM_BUDGET = 2 << 30  # bytes


class MemoryBudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class BenchProtocol:
    query_batch: int = 512
    rounds: int = 2000
    warmup: int = 100
    db_size: int = 1_300_000
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.query_batch < 1 or self.db_size < 0:
            raise ValueError("query_batch must be >= 1 and db_size >= 0")


@dataclass
class BenchResult:
    kind: str
    active_dim: int
    h: int
    db_size: int
    query_batch: int
    rounds: int
    warmup: int
    mean_latency: float
    std_latency: float
    total_mults: int
    expected_mults: float
    relative_time: float
    build_time: float


BENCH_FIELDS = tuple(f.name for f in fields(BenchResult))


def expected_sparse_mults(q: int, n: int, k: int, h: int) -> float:
    return q * n * k * k / h


def expected_dense_mults(q: int, n: int, m: int) -> int:
    return q * n * m


def _time_rounds(fn, rounds: int, warmup: int):
    """Per-round wall times and the result of the last timed call."""
    for _ in range(warmup):
        fn()
    out = np.empty(rounds)
    result = None
    for i in range(rounds):
        t0 = time.perf_counter()
        result = fn()
        out[i] = time.perf_counter() - t0
    return out, result


def run_bench(
    index_kind: str,
    params: dict,
    proto: BenchProtocol = BenchProtocol(),
    *,
    n: int = 1,
    metric: str = "ip",
    threads: int = 1,
    mem_budget: int = DEFAULT_MEM_BUDGET,
    reference_latency: Optional[float] = None,
    corpus=None,
    queries=None,
) -> BenchResult:
    """Time top-``n`` retrieval for one query batch over ``proto.rounds`` rounds.

    ``params`` holds ``k`` and ``h`` for the sparse kind or ``m`` for the dense
    kind. A synthetic corpus of ``proto.db_size`` rows is drawn unless
    ``corpus``/``queries`` are supplied. ``relative_time`` divides the mean
    latency by ``reference_latency`` and is 1.0 when no reference is given.
    """
    rng = np.random.default_rng(proto.seed)
    if index_kind == "sparse":
        if corpus is None:
            k, h = int(params["k"]), int(params["h"])
            corpus = random_sparse(proto.db_size, k, h, rng=rng)
        if queries is None:
            queries = random_sparse(proto.query_batch, int(params["k"]), corpus.cols, rng=rng)
        need = corpus.nnz * 24 + corpus.rows * 16
        if need > mem_budget:
            raise MemoryBudgetError(f"sparse corpus needs ~{need} bytes > budget {mem_budget}")
        t0 = time.perf_counter()
        index = build_sparse_index(corpus)
        build = time.perf_counter() - t0
        active = int(params.get("k", round(corpus.nnz / max(corpus.rows, 1))))
        h = corpus.cols
        expected = expected_sparse_mults(queries.rows, corpus.rows, active, h)

        def once():
            return knn_batch(index, queries, n, metric, threads)

    elif index_kind == "dense":
        m = int(params["m"]) if corpus is None else np.asarray(corpus).shape[1]
        rows = proto.db_size if corpus is None else np.asarray(corpus).shape[0]
        need = rows * m * 4
        if need > mem_budget:
            raise MemoryBudgetError(f"dense corpus {rows}x{m} needs {need} bytes > budget {mem_budget}")
        if corpus is None:
            corpus = random_dense(rows, m, rng=rng)
        if queries is None:
            queries = random_dense(proto.query_batch, m, rng=rng)
        t0 = time.perf_counter()
        index = build_dense_index(corpus)
        build = time.perf_counter() - t0
        active, h = m, m
        expected = expected_dense_mults(np.asarray(queries).shape[0], rows, m)

        def once():
            return knn_dense_batch(index, queries, n, metric, threads)

    else:
        raise ValueError(f"unknown index kind {index_kind!r}")

    lat, result = _time_rounds(once, proto.rounds, proto.warmup)
    mean = float(lat.mean())
    return BenchResult(
        kind=index_kind,
        active_dim=active,
        h=h,
        db_size=index.size,
        query_batch=result.mults.size,
        rounds=proto.rounds,
        warmup=proto.warmup,
        mean_latency=mean,
        std_latency=float(lat.std()),
        total_mults=result.total_mults,
        expected_mults=float(expected),
        relative_time=mean / reference_latency if reference_latency else 1.0,
        build_time=build,
    )


def recon_mse(model: SaeModel, data, k: int, chunk: int = 4096) -> float:
    """Mean squared reconstruction error at sparsity ``k``."""
    data = np.asarray(data)
    if data.shape[0] == 0:
        return 0.0
    W = model.W_enc.astype(np.float64)
    b_pre = model.b_pre.astype(np.float64)
    total = 0.0
    for lo in range(0, data.shape[0], chunk):
        V = data[lo : lo + chunk].astype(np.float64)
        Z = _codes_from_pre(pre_activations(model, V), k)
        E = V - (Z @ W + b_pre)
        total += float(np.einsum("ij,ij->i", E, E).sum())
    return total / data.shape[0]


@dataclass
class FidelityRow:
    active_dim: int
    sparse_1nn: float
    truncated_dense_1nn: float
    full_dense_1nn: float
    recon_mse: float
    dead_fraction: float


FIDELITY_FIELDS = tuple(f.name for f in fields(FidelityRow))


def _split(split, n: int):
    if isinstance(split, tuple) and len(split) == 2:
        return np.asarray(split[0]), np.asarray(split[1])
    mask = np.asarray(split, dtype=bool)
    if mask.shape != (n,):
        raise ValueError("split mask must have one entry per row")
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def compare_fidelity(
    dense_emb,
    model: SaeModel,
    k_values: Sequence[int],
    labels,
    split,
    metric: str = "l2",
    threads: int = 1,
) -> list[FidelityRow]:
    """1-NN accuracy of sparse codes vs truncated and full dense embeddings.

    ``split`` is either ``(train_rows, query_rows)`` or a boolean mask that is
    True for query rows. ``dead_fraction`` is the share of latents that never
    fire when encoding the train rows at that ``k``.
    """
    X = np.asarray(dense_emb, dtype=np.float32)
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],):
        raise ValueError("labels must align with embeddings")
    tr, qr = _split(split, X.shape[0])
    Xtr, Xq, ytr, yq = X[tr], X[qr], labels[tr], labels[qr]
    full = one_nn_accuracy(Xtr, ytr, Xq, yq, metric, threads=threads)
    rows = []
    for k in k_values:
        ctr = encode_batch(model, Xtr, k)
        cq = encode_batch(model, Xq, k)
        m = min(k, X.shape[1])
        trunc = one_nn_accuracy(Xtr[:, :m], ytr, Xq[:, :m], yq, metric, threads=threads)
        used = np.zeros(model.h, dtype=bool)
        used[ctr.indices] = True
        rows.append(
            FidelityRow(
                active_dim=k,
                sparse_1nn=one_nn_accuracy(ctr, ytr, cq, yq, metric, threads=threads),
                truncated_dense_1nn=trunc,
                full_dense_1nn=full,
                recon_mse=recon_mse(model, X, k),
                dead_fraction=float(1.0 - used.mean()),
            )
        )
    return rows


def to_csv(records, field_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(field_names)
    for r in records:
        d = asdict(r) if not isinstance(r, dict) else r
        w.writerow([_fmt(d[f]) for f in field_names])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))

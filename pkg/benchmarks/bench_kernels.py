"""Compare the numba kernels with their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--n 200000] [--k 32] [--h 16384] [--queries 64]

Both paths run in the same process on the same inputs; results are checked
for agreement before timing. Set CSR_EMBED_DISABLE_NUMBA=1 to make the
library itself use the numpy path.
"""

import argparse
import time

import numpy as np

from csr_embed import _kernels as K
from csr_embed.index import build_sparse_index
from csr_embed.synthetic import random_sparse


def best(fn, rounds):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(rounds):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--k", type=int, default=32)
    ap.add_argument("--h", type=int, default=16384)
    ap.add_argument("--queries", type=int, default=64)
    ap.add_argument("--rounds", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    corpus = random_sparse(args.n, args.k, args.h, seed=0)
    queries = random_sparse(args.queries, args.k, args.h, seed=1)
    idx = build_sparse_index(corpus)
    buf = np.zeros(idx.size)

    def scatter(impl):
        def run():
            for r in range(queries.rows):
                lo, hi = queries.indptr[r], queries.indptr[r + 1]
                buf[:] = 0.0
                impl(idx.post_ptr, idx.post_rows, idx.post_vals, queries.indices[lo:hi], queries.values[lo:hi], buf)

        return run

    def matvec(impl):
        out = np.zeros(corpus.rows)
        q = queries.row(0)
        return lambda: impl(corpus.indptr, corpus.indices, corpus.values, q.indices, q.values, corpus.cols, out)

    def dots(impl):
        a, b = corpus.row(0), corpus.row(1)
        return lambda: [impl(a.indices, a.values, b.indices, b.values) for _ in range(10_000)]

    # agreement first
    a, b = np.zeros(idx.size), np.zeros(idx.size)
    q = queries.row(0)
    assert K.numpy_scatter_postings(idx.post_ptr, idx.post_rows, idx.post_vals, q.indices, q.values, a) == K.numba_scatter_postings(
        idx.post_ptr, idx.post_rows, idx.post_vals, q.indices, q.values, b
    )
    assert np.array_equal(a, b)

    cases = [
        (f"scatter_postings x{args.queries} queries", scatter(K.numpy_scatter_postings), scatter(K.numba_scatter_postings)),
        ("csr_matvec, 1 query", matvec(K.numpy_csr_matvec), matvec(K.numba_csr_matvec)),
        ("sparse_dot x10000", dots(K.numpy_sparse_dot), dots(K.numba_sparse_dot)),
    ]
    print(f"corpus N={args.n} k={args.k} h={args.h}; best of {args.rounds}")
    print(f"{'kernel':<34}{'numpy s':>10}{'numba s':>10}{'speedup':>9}")
    for name, f_np, f_nb in cases:
        t_np, t_nb = best(f_np, args.rounds), best(f_nb, args.rounds)
        print(f"{name:<34}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()

"""Command-line entry point: ``csr-embed {train,encode,search,eval,bench,inspect}``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as fio
from .config import TrainConfig, load_config
from .core import DimensionMismatch, SparseMatrixCSR
from .eval import (
    BENCH_FIELDS,
    DEFAULT_MEM_BUDGET,
    FIDELITY_FIELDS,
    BenchProtocol,
    MemoryBudgetError,
    compare_fidelity,
    run_bench,
    to_csv,
)
from .index import build_sparse_index, knn_batch
from .model import encode_batch, load_model, save_model
from .objective import DivergenceError
from .trainer import TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
DEFAULT_SEED = 0

log = logging.getLogger("csr_embed")


class UsageError(Exception):
    pass


def _default_threads() -> int:
    env = os.environ.get("CSR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"CSR_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be >= 1")
    return vals


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    data = fio.load_dense(args.data)
    labels = fio.load_labels(args.labels) if args.labels else None
    try:
        model, report = train(data, labels, cfg)
    except TrainingDiverged as exc:
        save_model(exc.model, f"{args.out}.last_good")
        print(f"error: training diverged ({exc}); last good model written to {args.out}.last_good", file=sys.stderr)
        return EXIT_NUMERIC
    if not model.is_finite():
        print("error: trained parameters overflow float32", file=sys.stderr)
        return EXIT_NUMERIC
    save_model(model, args.out)
    report.write(args.report or f"{args.out}.report.jsonl")
    return EXIT_OK


def cmd_encode(args) -> int:
    model = load_model(args.model)
    data = fio.load_dense(args.data)
    if data.shape[1] != model.d:
        raise DimensionMismatch(f"data has {data.shape[1]} columns, model expects {model.d}")
    if args.k > model.h:
        raise UsageError(f"--k {args.k} exceeds model latent dim {model.h}")
    fio.save_sparse(encode_batch(model, data, args.k), args.out)
    return EXIT_OK


def _load_queries(args, dim: int) -> SparseMatrixCSR:
    kind = fio.file_kind(args.query)
    if kind == fio.KIND_SPARSE:
        return fio.load_sparse(args.query)
    if kind == fio.KIND_DENSE:
        if not args.model or not args.k:
            raise UsageError("dense queries need --model and --k to encode them")
        model = load_model(args.model)
        if model.h != dim:
            raise DimensionMismatch(f"model latent dim {model.h} != index dim {dim}")
        return encode_batch(model, fio.load_dense(args.query), args.k)
    raise UsageError(f"{args.query}: expected a dense or sparse file")


def cmd_search(args) -> int:
    corpus = fio.load_sparse(args.index)
    queries = _load_queries(args, corpus.cols)
    if queries.cols != corpus.cols:
        raise DimensionMismatch(f"query dim {queries.cols} != index dim {corpus.cols}")
    res = knn_batch(build_sparse_index(corpus), queries, args.n, args.metric, args.threads)
    lines = ["query,rank,id,score\n"]
    for q in range(queries.rows):
        for rank, (i, s) in enumerate(zip(res.ids[q], res.scores[q])):
            if i < 0:
                break
            lines.append(f"{q},{rank},{i},{float(s)!r}\n")
    _emit("".join(lines), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    data = fio.load_dense(args.data)
    labels = fio.load_labels(args.labels)
    if args.query_data:
        if not args.query_labels:
            raise UsageError("--query-data needs --query-labels")
        qdata = fio.load_dense(args.query_data)
        qlabels = fio.load_labels(args.query_labels)
        X = np.vstack([data, qdata])
        y = np.concatenate([labels, qlabels])
        split = (np.arange(data.shape[0]), np.arange(data.shape[0], X.shape[0]))
    else:
        X, y = data, labels
        rng = np.random.default_rng(args.seed)
        n_query = max(1, int(round(args.query_fraction * X.shape[0])))
        perm = rng.permutation(X.shape[0])
        split = (np.sort(perm[n_query:]), np.sort(perm[:n_query]))
    if X.shape[1] != model.d:
        raise DimensionMismatch(f"data has {X.shape[1]} columns, model expects {model.d}")
    if max(args.k) > model.h:
        raise UsageError(f"k values must not exceed model latent dim {model.h}")
    rows = compare_fidelity(X, model, args.k, y, split, args.metric, args.threads)
    _emit(to_csv(rows, FIDELITY_FIELDS), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    proto = BenchProtocol(
        query_batch=args.batch, rounds=args.rounds, warmup=args.warmup, db_size=0, seed=args.seed
    )
    common = dict(n=args.n, metric=args.metric, threads=args.threads, mem_budget=args.mem_budget)
    if args.reference_latency is not None:
        common["reference_latency"] = args.reference_latency
    if args.synthetic:
        N, k, h = args.synthetic
        if k > h:
            raise UsageError("--synthetic needs k <= h")
        res = run_bench("sparse", {"k": k, "h": h}, replace(proto, db_size=N), **common)
    elif args.dense:
        N, m = args.dense
        res = run_bench("dense", {"m": m}, replace(proto, db_size=N), **common)
    else:
        corpus = fio.load_sparse(args.index)
        queries = fio.load_sparse(args.query)
        res = run_bench("sparse", {}, proto, corpus=corpus, queries=queries, **common)
    _emit(to_csv([res], BENCH_FIELDS), args.out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    kind = fio.file_kind(args.path)
    if kind == -1:
        m = load_model(args.path)
        print(f"model d={m.d} h={m.h}")
    elif kind == fio.KIND_DENSE:
        x = fio.load_dense(args.path)
        print(f"dense rows={x.shape[0]} cols={x.shape[1]}")
    elif kind == fio.KIND_SPARSE:
        s = fio.load_sparse(args.path)
        nnz = s.row_nnz()
        mean = float(nnz.mean()) if s.rows else 0.0
        print(f"sparse rows={s.rows} cols={s.cols} nnz={s.nnz} mean_row_nnz={mean:.3f} max_row_nnz={int(nnz.max(initial=0))}")
    elif kind == fio.KIND_LABELS:
        y = fio.load_labels(args.path)
        print(f"labels rows={y.size} classes={np.unique(y).size}")
    else:
        raise fio.FormatError(f"{args.path}: unknown kind {kind}")
    return EXIT_OK


def _pair(n: int):
    def parse(text: str):
        try:
            vals = [int(t) for t in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers")
        if len(vals) != n or min(vals) < 1:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated positive integers")
        return vals

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csr-embed", description="Sparse embedding compression and exact retrieval.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=_positive, default=None, help="worker threads (default: $CSR_THREADS or CPU count)")

    t = sub.add_parser("train", help="fit a sparse autoencoder")
    t.add_argument("--data", required=True)
    t.add_argument("--labels")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--report", help="TrainReport path (default: <out>.report.jsonl)")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode dense rows into a sparse file")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=_positive, required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    s = sub.add_parser("search", help="exact k-NN over a sparse corpus")
    s.add_argument("--index", required=True, help="sparse corpus file")
    s.add_argument("--query", required=True, help="sparse queries, or dense queries with --model/--k")
    s.add_argument("--model")
    s.add_argument("--k", type=_positive)
    s.add_argument("--n", type=_positive, default=10)
    s.add_argument("--metric", choices=("l2", "ip"), default="l2")
    s.add_argument("--out")
    threads(s)
    s.set_defaults(func=cmd_search)

    v = sub.add_parser("eval", help="1-NN fidelity table")
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--labels", required=True)
    v.add_argument("--query-data")
    v.add_argument("--query-labels")
    v.add_argument("--query-fraction", type=float, default=0.2)
    v.add_argument("--k", type=_int_list, default=[8])
    v.add_argument("--metric", choices=("l2", "ip"), default="l2")
    v.add_argument("--seed", type=int, default=DEFAULT_SEED)
    v.add_argument("--out")
    threads(v)
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="retrieval latency and multiplication counts")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=_pair(3), metavar="N,k,h")
    src.add_argument("--dense", type=_pair(2), metavar="N,m")
    src.add_argument("--index", help="sparse corpus file (needs --query)")
    b.add_argument("--query")
    b.add_argument("--batch", type=_positive, default=512)
    b.add_argument("--rounds", type=_positive, default=2000)
    b.add_argument("--warmup", type=int, default=100)
    b.add_argument("--n", type=_positive, default=1)
    b.add_argument("--metric", choices=("l2", "ip"), default="ip")
    b.add_argument("--seed", type=int, default=DEFAULT_SEED)
    b.add_argument("--mem-budget", type=int, default=DEFAULT_MEM_BUDGET, help="bytes")
    b.add_argument("--reference-latency", type=float, help="seconds per batch of the reference configuration")
    b.add_argument("--out")
    threads(b)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="describe a data, code, label or model file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def _validate(args) -> None:
    if getattr(args, "command", None) == "bench":
        if args.index and not args.query:
            raise UsageError("--index needs --query")
        if args.warmup < 0:
            raise UsageError("--warmup must be >= 0")
    if getattr(args, "command", None) == "eval" and not 0 < args.query_fraction < 1:
        raise UsageError("--query-fraction must be in (0, 1)")
    if hasattr(args, "threads") and args.threads is None:
        args.threads = _default_threads()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _validate(args)
        return args.func(args)
    except (TrainingDiverged, DivergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, fio.FormatError, DimensionMismatch, MemoryBudgetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

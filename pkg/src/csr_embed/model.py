"""Tied TopK sparse autoencoder.

The encoder computes ``a = W_enc (v - b_pre) + b_enc``, keeps the top ``k``
entries of ``a`` and then applies ReLU, so a code may carry fewer than ``k``
non-zeros. The decoder is the transpose of the encoder plus ``b_pre``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import io as _io
from .core import DimensionMismatch, SparseMatrixCSR, SparseVector, top_k_mask, top_k_select


@dataclass(eq=False)
class SaeModel:
    W_enc: np.ndarray  # (h, d)
    b_enc: np.ndarray  # (h,)
    b_pre: np.ndarray  # (d,)

    def __post_init__(self):
        h, d = self.W_enc.shape
        if self.b_enc.shape != (h,) or self.b_pre.shape != (d,):
            raise DimensionMismatch("bias shapes do not match W_enc")

    @property
    def d(self) -> int:
        return self.W_enc.shape[1]

    @property
    def h(self) -> int:
        return self.W_enc.shape[0]

    @property
    def W_dec(self) -> np.ndarray:
        return self.W_enc.T

    def astype(self, dtype) -> "SaeModel":
        return SaeModel(self.W_enc.astype(dtype), self.b_enc.astype(dtype), self.b_pre.astype(dtype))

    def copy(self) -> "SaeModel":
        return SaeModel(self.W_enc.copy(), self.b_enc.copy(), self.b_pre.copy())

    def params(self) -> dict[str, np.ndarray]:
        return {"W_enc": self.W_enc, "b_enc": self.b_enc, "b_pre": self.b_pre}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params().values())

    def __eq__(self, other):
        if not isinstance(other, SaeModel):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.params().values(), other.params().values()))


@dataclass
class ForwardCache:
    pre_activations: np.ndarray
    selected_k: np.ndarray
    z_k: SparseVector
    recon_k: np.ndarray
    selected_4k: Optional[np.ndarray] = None
    z_4k: Optional[SparseVector] = None
    recon_4k: Optional[np.ndarray] = None
    k4: Optional[int] = None


def init_model(d: int, h: int, seed: int = 0, data_mean=None) -> SaeModel:
    """Uniform rows in [-1/sqrt(d), 1/sqrt(d)], each rescaled to unit norm."""
    if d < 1 or h < 1:
        raise ValueError("d and h must be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    W = rng.uniform(-bound, bound, size=(h, d))
    norms = np.linalg.norm(W, axis=1, keepdims=True)
    # a zero row has probability 0 but would poison the normalisation
    norms[norms == 0] = 1.0
    W = (W / norms).astype(np.float32)
    b_pre = np.zeros(d, np.float32) if data_mean is None else np.asarray(data_mean, np.float32).copy()
    if b_pre.shape != (d,):
        raise DimensionMismatch("data_mean must have length d")
    return SaeModel(W, np.zeros(h, np.float32), b_pre)


def pre_activations(model: SaeModel, V: np.ndarray, counter: Counter | None = None) -> np.ndarray:
    """``(V - b_pre) @ W_enc.T + b_enc`` for a batch, accumulated in float64."""
    V = np.asarray(V)
    if V.shape[-1] != model.d:
        raise DimensionMismatch(f"input dim {V.shape[-1]} != model d {model.d}")
    W = model.W_enc.astype(np.float64, copy=False)
    A = (V.astype(np.float64) - model.b_pre) @ W.T + model.b_enc
    if counter is not None:
        counter["encode_mults"] += int(np.prod(V.shape[:-1], dtype=np.int64)) * model.h * model.d
    return A


def _check_k(model: SaeModel, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > model.h:
        raise ValueError(f"k={k} exceeds latent dim h={model.h}")


def _codes_from_pre(A: np.ndarray, k: int) -> np.ndarray:
    """TopK then ReLU, dense (batch, h) float64."""
    mask = top_k_mask(A, k)
    return np.where(mask & (A > 0), A, 0.0)


def encode(model: SaeModel, v, k: int, counter: Counter | None = None) -> SparseVector:
    _check_k(model, k)
    a = pre_activations(model, np.asarray(v)[None, :], counter)[0]
    sel = top_k_select(a, k)
    return _sparse_from(model.h, sel, a[sel])


def _sparse_from(h: int, idx: np.ndarray, vals: np.ndarray) -> SparseVector:
    vals = vals.astype(np.float32)
    keep = vals > 0
    return SparseVector(h, idx[keep], vals[keep])


def encode_batch(
    model: SaeModel, V, k: int, chunk: int = 4096, counter: Counter | None = None
) -> SparseMatrixCSR:
    """Encode every row of ``V``; equivalent to calling :func:`encode` per row."""
    _check_k(model, k)
    V = np.asarray(V)
    if V.ndim != 2:
        raise ValueError("expected a 2-D batch")
    parts = []
    for lo in range(0, V.shape[0], chunk):
        Z = _codes_from_pre(pre_activations(model, V[lo : lo + chunk], counter), k).astype(np.float32)
        parts.append(Z)
    if not parts:
        return SparseMatrixCSR(0, model.h, np.zeros(1, np.int64), np.empty(0, np.int64), np.empty(0, np.float32))
    return _csr_from_dense_chunks(parts, model.h)


def _csr_from_dense_chunks(parts, h) -> SparseMatrixCSR:
    indptr = [np.zeros(1, np.int64)]
    indices, values = [], []
    offset = 0
    for Z in parts:
        mask = Z > 0
        r, c = np.nonzero(mask)
        indices.append(c)
        values.append(Z[r, c])
        indptr.append(offset + np.cumsum(mask.sum(axis=1)))
        offset += int(mask.sum())
    return SparseMatrixCSR(
        sum(p.shape[0] for p in parts),
        h,
        np.concatenate(indptr),
        np.concatenate(indices),
        np.concatenate(values),
    )


def decode(model: SaeModel, z: SparseVector, counter: Counter | None = None) -> np.ndarray:
    """``b_pre + sum_j z_j * W_enc[j]``; touches only the non-zero rows."""
    if z.dim != model.h:
        raise DimensionMismatch(f"code dim {z.dim} != model h {model.h}")
    out = model.b_pre.astype(np.float64).copy()
    if z.nnz:
        out += z.values.astype(np.float64) @ model.W_enc[z.indices].astype(np.float64)
    if counter is not None:
        counter["decode_mults"] += z.nnz * model.d
    return out


def decode_batch(model: SaeModel, codes: SparseMatrixCSR) -> np.ndarray:
    if codes.cols != model.h:
        raise DimensionMismatch(f"code dim {codes.cols} != model h {model.h}")
    out = np.tile(model.b_pre.astype(np.float64), (codes.rows, 1))
    row_of = np.repeat(np.arange(codes.rows), codes.row_nnz())
    contrib = codes.values.astype(np.float64)[:, None] * model.W_enc[codes.indices].astype(np.float64)
    np.add.at(out, row_of, contrib)
    return out


def forward(model: SaeModel, v, k: int, compute_multi: bool = True) -> ForwardCache:
    _check_k(model, k)
    a = pre_activations(model, np.asarray(v)[None, :])[0]
    sel = top_k_select(a, k)
    z = _sparse_from(model.h, sel, a[sel])
    cache = ForwardCache(pre_activations=a, selected_k=sel, z_k=z, recon_k=decode(model, z))
    if compute_multi:
        k4 = min(4 * k, model.h)
        sel4 = top_k_select(a, k4)
        z4 = _sparse_from(model.h, sel4, a[sel4])
        cache.k4 = k4
        cache.selected_4k = sel4
        cache.z_4k = z4
        cache.recon_4k = decode(model, z4)
        assert np.all(np.isin(sel, sel4)), "top-k selection must nest inside top-4k"
    return cache


def save_model(model: SaeModel, path) -> None:
    if not model.is_finite():
        raise ValueError("refusing to save non-finite parameters")
    _io.save_model_arrays(model.W_enc, model.b_enc, model.b_pre, path)


def load_model(path) -> SaeModel:
    return SaeModel(*_io.load_model_arrays(path))

"""Training objective and its analytic gradients.

total = L(k) + L(4k)/8 + beta * L_aux + gamma * L_ncl

Gradients pass through TopK only on the active set (selected and positive
after ReLU); selection itself is treated as piecewise constant. With tied
weights, ``W_enc`` collects both the encoder term and the transposed
decoder term, and ``b_pre`` collects both the input-centering and the
output-offset term. Everything is computed in float64.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import DimensionMismatch, SparseVector, top_k_mask
from .model import SaeModel, pre_activations

MULTI_FACTOR = 4
MULTI_WEIGHT = 1.0 / 8.0
ALL_TERMS = frozenset({"k", "4k", "aux", "ncl"})


class DivergenceError(FloatingPointError):
    pass


@dataclass
class BatchLossBreakdown:
    l_k: float
    l_4k: float
    l_aux: float
    l_ncl: float
    total: float
    grads: dict = field(default_factory=dict)
    # union over the batch of latents active in the k branch
    active: Optional[np.ndarray] = None

    def recombine(self, beta: float, gamma: float, multi: bool = True) -> float:
        return self.l_k + (self.l_4k * MULTI_WEIGHT if multi else 0.0) + beta * self.l_aux + gamma * self.l_ncl


def recon_loss(v, recon) -> float:
    """Squared L2 error; for 2-D inputs, the mean over rows."""
    v = np.asarray(v, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if v.shape != recon.shape:
        raise DimensionMismatch(f"{v.shape} != {recon.shape}")
    diff = v - recon
    if diff.ndim == 1:
        return float(diff @ diff)
    return float(np.mean(np.einsum("ij,ij->i", diff, diff)))


def _aux_mask(A: np.ndarray, dead: np.ndarray, k_aux: int) -> np.ndarray:
    """Row-wise top ``k_aux`` pre-activations among dead latents, positive only."""
    n_dead = int(dead.sum())
    if n_dead == 0 or k_aux == 0:
        return np.zeros(A.shape, dtype=bool)
    cols = np.flatnonzero(dead)
    sub = A[:, cols]
    sel = top_k_mask(sub, min(k_aux, n_dead)) & (sub > 0)
    mask = np.zeros(A.shape, dtype=bool)
    mask[:, cols] = sel
    return mask


def _dead_mask(dead, h: int) -> np.ndarray:
    dead = np.asarray(dead if dead is not None else [])
    if dead.dtype == bool:
        if dead.shape != (h,):
            raise DimensionMismatch("boolean dead mask must have length h")
        return dead
    mask = np.zeros(h, dtype=bool)
    if dead.size:
        idx = dead.astype(np.int64)
        if idx.min() < 0 or idx.max() >= h:
            raise ValueError("dead latent index out of range")
        mask[idx] = True
    return mask


def aux_loss(v, recon_k, model: SaeModel, dead, k_aux: int, pre=None) -> float:
    """Residual fit from the top ``k_aux`` dead latents (no ``b_pre`` offset).

    ``v``/``recon_k`` may be single vectors or batches; batches are averaged.
    ``pre`` reuses pre-activations already computed by a forward pass.
    """
    V = np.atleast_2d(np.asarray(v, dtype=np.float64))
    R = np.atleast_2d(np.asarray(recon_k, dtype=np.float64))
    dead = _dead_mask(dead, model.h)
    if not dead.any():
        return 0.0
    A = np.atleast_2d(pre) if pre is not None else pre_activations(model, V)
    M = _aux_mask(A, dead, k_aux)
    e_hat = np.where(M, A, 0.0) @ model.W_enc.astype(np.float64)
    return recon_loss(V - R, e_hat) if V.shape[0] > 1 else recon_loss((V - R)[0], e_hat[0])


def _masked_lse(S: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over ``mask``; ``-inf`` for empty rows."""
    T = np.where(mask, S, -np.inf)
    m = T.max(axis=1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(under="ignore"):
        s = np.where(mask, np.exp(T - m_safe), 0.0).sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        return (np.log(s) + m_safe)[:, 0]


def ncl_dense(Z: np.ndarray, labels=None, normalize: bool = False) -> tuple[float, np.ndarray]:
    """Contrastive loss over a dense batch of codes and its gradient w.r.t. ``Z``.

    Unsupervised: the positive logit is each code's self-similarity and every
    other code in the batch is a negative. Supervised: the positive term is the
    mean of exp-similarities to same-label codes, and only different-label
    codes are negatives; samples with no in-batch positive are skipped.
    """
    Z = np.asarray(Z, dtype=np.float64)
    B = Z.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if normalize:
        norms = np.linalg.norm(Z, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        Zn = Z / safe
    else:
        Zn = Z
    S = Zn @ Zn.T
    eye = np.eye(B, dtype=bool)

    if labels is None:
        everything = np.ones((B, B), dtype=bool)
        lse = _masked_lse(S, everything)
        loss = float(np.mean(lse - np.diag(S)))
        P = np.exp(S - lse[:, None])
        G = (P - eye) / B
    else:
        labels = np.asarray(labels)
        if labels.shape != (B,):
            raise DimensionMismatch("labels must align with the batch")
        same = labels[:, None] == labels[None, :]
        pos = same & ~eye
        neg = ~same
        active = pos.any(axis=1)
        n_active = int(active.sum())
        G = np.zeros((B, B))
        if n_active == 0:
            loss = 0.0
        else:
            l_pos = _masked_lse(S, pos) - np.log(np.maximum(pos.sum(axis=1), 1))
            l_neg = _masked_lse(S, neg)
            l_den = np.logaddexp(l_pos, l_neg)
            per = l_den - l_pos
            loss = float(per[active].sum() / n_active)
            with np.errstate(under="ignore", invalid="ignore"):
                w_pos = np.where(pos, np.exp(S - (l_pos + np.log(np.maximum(pos.sum(axis=1), 1)))[:, None]), 0.0)
                share = np.exp(l_pos - l_den)
                g_pos = (share - 1.0)[:, None] * w_pos
                g_neg = np.where(neg, np.exp(S - l_den[:, None]), 0.0)
            G = np.where(active[:, None], g_pos + g_neg, 0.0) / n_active

    dZn = (G + G.T) @ Zn
    if normalize:
        radial = np.einsum("ij,ij->i", Zn, dZn)[:, None]
        dZ = np.where(norms > 0, (dZn - Zn * radial) / safe, 0.0)
    else:
        dZ = dZn
    return loss, dZ


def ncl_loss(z_batch: Sequence[SparseVector], labels=None, normalize: bool = False) -> float:
    z_batch = list(z_batch)
    if len(z_batch) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    dim = z_batch[0].dim
    if any(z.dim != dim for z in z_batch):
        raise DimensionMismatch("all codes must share a dimension")
    Z = np.stack([z.to_dense(np.float64) for z in z_batch])
    return ncl_dense(Z, labels, normalize)[0]


def batch_loss_and_grads(
    model: SaeModel,
    batch,
    labels,
    cfg,
    dead=None,
    counter: Optional[Counter] = None,
    terms: Optional[Iterable[str]] = None,
) -> BatchLossBreakdown:
    """Loss breakdown and gradients for one batch.

    ``terms`` restricts which weighted terms contribute to ``total`` and the
    gradients (subset of ``{"k", "4k", "aux", "ncl"}``); the default uses
    every term the config enables.
    """
    V = np.asarray(batch, dtype=np.float64)
    B = V.shape[0]
    terms = ALL_TERMS if terms is None else frozenset(terms)
    if not terms <= ALL_TERMS:
        raise ValueError(f"unknown terms {set(terms) - ALL_TERMS}")
    use_multi = cfg.k_multi_enabled and "4k" in terms
    use_aux = cfg.beta > 0 and "aux" in terms
    use_ncl = cfg.gamma > 0 and "ncl" in terms
    if use_ncl and B < 2:
        raise ValueError("contrastive term needs batch rows >= 2")
    if cfg.k > model.h:
        raise ValueError("k exceeds latent dim")

    W = model.W_enc.astype(np.float64)
    b_pre = model.b_pre.astype(np.float64)
    X = V - b_pre
    A = X @ W.T + model.b_enc.astype(np.float64)

    gW = np.zeros_like(W)
    g_bpre = np.zeros_like(b_pre)
    dA = np.zeros_like(A)

    def branch(k):
        M = top_k_mask(A, k) & (A > 0)
        Z = np.where(M, A, 0.0)
        R = Z @ W + b_pre
        return M, Z, R

    def back_output(G_R, M, Z):
        # R = Z W + b_pre
        nonlocal gW, g_bpre
        gW += Z.T @ G_R
        g_bpre += G_R.sum(axis=0)
        dA[...] += np.where(M, G_R @ W.T, 0.0)

    M_k, Z_k, R_k = branch(cfg.k)
    E_k = V - R_k
    l_k = float(np.mean(np.einsum("ij,ij->i", E_k, E_k)))
    G_Rk = np.zeros_like(V)
    if "k" in terms:
        G_Rk += -2.0 * E_k / B

    l_4k = 0.0
    if cfg.k_multi_enabled:
        k4 = min(MULTI_FACTOR * cfg.k, model.h)
        M_4, Z_4, R_4 = branch(k4)
        E_4 = V - R_4
        l_4k = float(np.mean(np.einsum("ij,ij->i", E_4, E_4)))
        if use_multi:
            back_output(-2.0 * MULTI_WEIGHT * E_4 / B, M_4, Z_4)

    l_aux = 0.0
    if cfg.beta > 0:
        if counter is not None:
            counter["aux_evals"] += 1
        dead_m = _dead_mask(dead, model.h)
        if dead_m.any() and cfg.k_aux > 0:
            M_aux = _aux_mask(A, dead_m, cfg.k_aux)
            Z_aux = np.where(M_aux, A, 0.0)
            D = E_k - Z_aux @ W  # e - e_hat
            l_aux = float(np.mean(np.einsum("ij,ij->i", D, D)))
            if use_aux:
                G = -2.0 * cfg.beta * D / B
                # d/dR_k and d/de_hat carry the same sign: D = V - (R_k + e_hat)
                G_Rk += G
                gW += Z_aux.T @ G
                dA += np.where(M_aux, G @ W.T, 0.0)

    l_ncl = 0.0
    if cfg.gamma > 0:
        if counter is not None:
            counter["ncl_evals"] += 1
        l_ncl, dZ = ncl_dense(Z_k, labels if cfg.supervised else None, getattr(cfg, "ncl_normalize", False))
        if use_ncl:
            dA += np.where(M_k, cfg.gamma * dZ, 0.0)

    back_output(G_Rk, M_k, Z_k)

    # encoder path: A = (V - b_pre) W^T + b_enc
    gW += dA.T @ X
    g_benc = dA.sum(axis=0)
    g_bpre -= (dA @ W).sum(axis=0)

    total = 0.0
    if "k" in terms:
        total += l_k
    if use_multi:
        total += MULTI_WEIGHT * l_4k
    if use_aux:
        total += cfg.beta * l_aux
    if use_ncl:
        total += cfg.gamma * l_ncl
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite loss {total}")

    return BatchLossBreakdown(
        l_k=l_k,
        l_4k=l_4k,
        l_aux=l_aux,
        l_ncl=l_ncl,
        total=float(total),
        grads={"W_enc": gW, "b_enc": g_benc, "b_pre": g_bpre},
        active=M_k.any(axis=0),
    )

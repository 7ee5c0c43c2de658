"""Seeded synthetic corpora for tests and benchmarks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SparseMatrixCSR


@dataclass(frozen=True)
class GaussianMixture:
    """Class-conditional Gaussians living near a low-dimensional subspace.

    The class centres are pairwise ``separation * sigma`` apart (scaled
    orthonormal vectors). Within-class noise has std ``sigma`` inside an
    ``intrinsic_dim``-dimensional subspace that contains the centres and
    ``ambient_sigma`` in the remaining directions. A random rotation then
    spreads everything over all ``d`` coordinates, so no coordinate prefix is
    privileged.
    """

    centers: np.ndarray  # (n_classes, d), already rotated
    noise_basis: np.ndarray  # (d, d) rotation
    noise_scale: np.ndarray  # (d,) std along each rotated axis

    @classmethod
    def make(
        cls,
        d: int = 64,
        n_classes: int = 10,
        separation: float = 4.0,
        sigma: float = 1.0,
        intrinsic_dim: int | None = None,
        ambient_sigma: float = 0.1,
        seed: int = 0,
    ) -> "GaussianMixture":
        r = n_classes if intrinsic_dim is None else intrinsic_dim
        if n_classes > d or r > d:
            raise ValueError("n_classes and intrinsic_dim must not exceed d")
        rng = np.random.default_rng(seed)
        rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
        local = np.zeros((n_classes, d))
        local[:, :n_classes] = separation * sigma / np.sqrt(2.0) * np.eye(n_classes)
        scale = np.full(d, ambient_sigma, dtype=np.float64)
        scale[:r] = sigma
        return cls(local @ rot.T, rot, scale)

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]

    def sample(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, self.n_classes, size=n)
        noise = (rng.standard_normal((n, self.d)) * self.noise_scale) @ self.noise_basis.T
        return (self.centers[labels] + noise).astype(np.float32), labels


def random_supports(rng: np.random.Generator, n: int, k: int, h: int) -> np.ndarray:
    """``n`` sorted rows of ``k`` distinct indices drawn uniformly from ``range(h)``."""
    if k > h:
        raise ValueError("k must not exceed h")
    if 2 * k > h:
        return np.sort(np.argsort(rng.random((n, h)), axis=1)[:, :k], axis=1)
    idx = np.sort(rng.integers(0, h, size=(n, k)), axis=1)
    while True:
        bad = np.flatnonzero((np.diff(idx, axis=1) == 0).any(axis=1))
        if bad.size == 0:
            return idx
        idx[bad] = np.sort(rng.integers(0, h, size=(bad.size, k)), axis=1)


def random_sparse(n: int, k: int, h: int, seed: int = 0, rng=None) -> SparseMatrixCSR:
    """Uniform random k-sparse corpus with positive values in (0, 1]."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    idx = random_supports(rng, n, k, h)
    vals = (1.0 - rng.random((n, k))).astype(np.float32)
    indptr = np.arange(0, n * k + 1, k, dtype=np.int64)
    return SparseMatrixCSR(n, h, indptr, idx.reshape(-1), vals.reshape(-1))


def random_dense(n: int, m: int, seed: int = 0, rng=None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(seed)
    return rng.standard_normal((n, m), dtype=np.float32)

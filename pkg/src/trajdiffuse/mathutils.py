"""Deterministic numeric kernels: seedable RNG streams, PCA, finite differences.

Everything here is pure and thread-safe as long as each worker owns its own
RngStream instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RngStream",
    "PcaCodec",
    "pca_fit",
    "pca_encode",
    "pca_decode",
    "finite_diff_grad",
]


class RngStream:
    """Seedable Gaussian/uniform RNG with hierarchical stream derivation.

    Built on numpy's PCG64 seeded through SeedSequence, so identical
    ``(seed, path)`` pairs reproduce bit-identical draw sequences across
    runs and machines. ``child(i)`` derives an independent stream; workers
    must never share one instance.
    """

    GENERATOR_KIND = "numpy-pcg64-ziggurat"

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def child(self, *path: int) -> "RngStream":
        """Independent stream addressed by ``(seed, *self.path, *path)``."""
        return RngStream(self.seed, *(self.path + path))

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def normal(self, loc=0.0, scale=1.0, shape=()) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"


@dataclass(frozen=True)
class PcaCodec:
    """Fitted linear codec: ``encode(X) = components @ (X - mean)``.

    components rows are orthonormal principal directions sorted by explained
    variance (population normalization, descending).
    """

    mean: np.ndarray                # (D,)
    components: np.ndarray          # (k, D), rows orthonormal
    explained_variance: np.ndarray  # (k,), non-increasing

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.components.shape[1]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comps = np.asarray(self.components, dtype=np.float64)
        ev = np.asarray(self.explained_variance, dtype=np.float64)
        if comps.ndim != 2 or mean.shape != (comps.shape[1],):
            raise ValueError("inconsistent codec shapes")
        if ev.shape != (comps.shape[0],):
            raise ValueError("explained_variance length must equal component count")
        gram = comps @ comps.T
        if not np.allclose(gram, np.eye(comps.shape[0]), atol=1e-6):
            raise ValueError("components are not orthonormal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "explained_variance", ev)


def pca_fit(samples: np.ndarray, k: int) -> PcaCodec:
    """Fit the top-k principal directions of a centered sample set.

    Uses an eigendecomposition of the population covariance (divide by n).
    Eigenvector sign ambiguity is fixed deterministically: the
    largest-magnitude entry of each component is made positive.

    Raises ValueError on fewer samples than k, k outside [1, D], or
    non-finite input.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"samples must be a 2-D array, got shape {X.shape}")
    n, dim = X.shape
    if not np.isfinite(X).all():
        raise ValueError("samples contain non-finite values")
    if k < 1 or k > dim:
        raise ValueError(f"k must be in [1, {dim}], got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")

    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)   # ascending
    order = np.argsort(eigvals)[::-1][:k]
    variance = np.maximum(eigvals[order], 0.0)
    comps = eigvecs[:, order].T.copy()
    for row in comps:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1.0
    return PcaCodec(mean=mean, components=comps, explained_variance=variance)


def pca_encode(codec: PcaCodec, X: np.ndarray) -> np.ndarray:
    """Project ``X`` (a D-vector or (..., D) stack) into latent coordinates."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != codec.ambient_dim:
        raise ValueError(
            f"expected last dimension {codec.ambient_dim}, got {X.shape[-1]}"
        )
    if not np.isfinite(X).all():
        raise ValueError("input contains non-finite values")
    return (X - codec.mean) @ codec.components.T


def pca_decode(codec: PcaCodec, z: np.ndarray) -> np.ndarray:
    """Map latent coordinates back to the ambient space.

    ``decode(encode(X))`` is the orthogonal projection of X onto the span of
    the components, shifted by the mean.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != codec.k:
        raise ValueError(f"expected last dimension {codec.k}, got {z.shape[-1]}")
    if not np.isfinite(z).all():
        raise ValueError("input contains non-finite values")
    return z @ codec.components + codec.mean


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    Test oracle for analytic gradients; O(2n) evaluations of f.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xflat = x.reshape(-1)
    for i in range(xflat.size):
        step = np.zeros_like(xflat)
        step[i] = h
        hi = f((xflat + step).reshape(x.shape))
        lo = f((xflat - step).reshape(x.shape))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        flat[i] = (hi - lo) / (2.0 * h)
    return grad

"""Exact PCA through a cyclic Jacobi eigendecomposition of the covariance matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DimensionError


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100):
    """Eigenvalues and eigenvectors (columns) of a symmetric matrix.

    Cyclic-by-row Jacobi rotations; unsorted output.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise DimensionError(f"jacobi_eigh needs a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ValueError("jacobi_eigh needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        # summed directly: sum(a*a) - sum(diag**2) cancels down to sqrt(eps)
        off = np.sqrt(np.sum(a[mask] ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (latent_dim, input_dim), orthonormal rows
    eigenvalues: np.ndarray  # kept, descending
    all_eigenvalues: np.ndarray

    @property
    def latent_dim(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]


def population_covariance(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    return xc.T @ xc / x.shape[0]


def fit_pca(train: np.ndarray, latent_dim: int) -> PcaModel:
    train = np.asarray(train, dtype=np.float64)
    n, d = train.shape
    if n <= d:
        raise DegenerateError(f"PCA needs more rows ({n}) than features ({d})")
    if not 1 <= latent_dim <= d:
        raise DimensionError(f"latent_dim must be in [1, {d}], got {latent_dim}")
    mean = train.mean(axis=0)
    cov = population_covariance(train)
    vals, vecs = jacobi_eigh(cov)
    if vals.max() <= 0.0:
        raise DegenerateError("data has zero variance in every direction")
    order = np.lexsort((np.arange(d), -vals))
    vals = vals[order]
    vecs = vecs[:, order]
    for j in range(d):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return PcaModel(mean, vecs[:, :latent_dim].T.copy(), vals[:latent_dim].copy(), vals)


def pca_transform(model: PcaModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise DimensionError(f"PCA expects width {model.input_dim}, got shape {batch.shape}")
    return (batch - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2 or latent.shape[1] != model.latent_dim:
        raise DimensionError(f"PCA latent width is {model.latent_dim}, got shape {latent.shape}")
    return latent @ model.components + model.mean

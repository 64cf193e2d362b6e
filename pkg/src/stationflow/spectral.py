"""Spectral clustering baseline on a dense affinity matrix.

The affinity is derived from the symmetric trade-off dissimilarity as
(1 - D) / max(D) with negative entries clipped to zero. Clustering goes
through the symmetric normalized Laplacian, whose smallest eigenpairs are
extracted with a cyclic Jacobi rotation sweep, followed by row
normalization and k-medoids on the embedded rows.
"""

from __future__ import annotations

import numpy as np

from .clustering import Clustering, k_medoids, pairwise_l2
from .errors import DataError, NumericError


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi.

    Sweeps rotate away each off-diagonal element in turn until the
    off-diagonal Frobenius mass falls below tol relative to the matrix
    norm. Returns eigenvalues ascending and eigenvectors as columns.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12, rtol=0.0):
        raise ValueError("matrix must be symmetric")
    v = np.eye(n)
    scale = max(float(np.linalg.norm(a)), 1.0)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.square(a - np.diag(np.diagonal(a)))))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * scale / max(n, 1) / 10.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q

    eigvals = np.diagonal(a).copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], v[:, order]


def affinity_from_dissimilarity(d_sym: np.ndarray) -> np.ndarray:
    """Affinity (1 - D) / max(D), clipped to be non-negative."""
    if not np.all(np.isfinite(d_sym)):
        raise NumericError("dissimilarity matrix has non-finite entries")
    max_d = float(d_sym.max())
    if max_d == 0:
        return np.ones_like(d_sym)
    s = (1.0 - d_sym) / max_d
    np.maximum(s, 0.0, out=s)
    return s


def spectral_cluster_affinity(s: np.ndarray, k: int, seed: int = 0, max_iters: int = 100) -> Clustering:
    """Cluster rows of the normalized-Laplacian spectral embedding."""
    if not np.all(np.isfinite(s)):
        raise NumericError("affinity matrix has non-finite entries")
    n = s.shape[0]
    deg = s.sum(axis=1)
    inv_sqrt = np.zeros(n)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    lap = np.eye(n) - (inv_sqrt[:, None] * s * inv_sqrt[None, :])
    _, vecs = jacobi_eigh(lap)
    emb = vecs[:, :k]
    norms = np.linalg.norm(emb, axis=1)
    rows = norms > 0
    emb[rows] = emb[rows] / norms[rows, None]
    return k_medoids(pairwise_l2(emb), k, seed=seed, max_iters=max_iters)


def baseline_spectral(d_sym: np.ndarray, k: int = 70, seed: int = 0, max_iters: int = 100) -> Clustering:
    """Spectral baseline on the trade-off dissimilarity matrix."""
    if d_sym.shape[0] < k:
        raise DataError(f"cannot form {k} clusters from {d_sym.shape[0]} stations")
    return spectral_cluster_affinity(affinity_from_dissimilarity(d_sym), k, seed=seed, max_iters=max_iters)

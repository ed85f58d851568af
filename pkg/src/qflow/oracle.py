"""Closed-form and exact reference quantities used to check learned models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .data import GmmSpec

__all__ = [
    "AffineMap",
    "sqrtm_psd",
    "gaussian_ot_map",
    "gmm_log_density",
    "true_log_ratio",
    "discrete_ot",
    "true_mi",
    "block_gaussian_log_ratio",
]

EIG_CLAMP = 1e-12


@dataclass
class AffineMap:
    matrix: np.ndarray
    offset: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.matrix.T + self.offset


def _check_spd(a: np.ndarray, name: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[0] != a.shape[1] or not np.allclose(a, a.T, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric matrix")
    if np.linalg.eigvalsh(a).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return a


def sqrtm_psd(a: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Symmetric square root (or inverse root) via eigendecomposition."""
    w, v = np.linalg.eigh(a)
    if w.min() < -EIG_CLAMP * max(1.0, abs(w).max()):
        raise ValueError("matrix is not positive semi-definite")
    w = np.clip(w, 0.0, None)
    if inverse:
        w = 1.0 / w
    return (v * np.sqrt(w)) @ v.T


def gaussian_ot_map(mu1, cov1, mu2, cov2) -> tuple[AffineMap, float]:
    """Optimal map between N(mu1, cov1) and N(mu2, cov2) and the squared W2 distance."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    s1 = _check_spd(cov1, "cov1")
    s2 = _check_spd(cov2, "cov2")
    r1 = sqrtm_psd(s1)
    r1_inv = sqrtm_psd(s1, inverse=True)
    middle = sqrtm_psd(r1 @ s2 @ r1)
    A = r1_inv @ middle @ r1_inv
    A = 0.5 * (A + A.T)
    w2 = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2.0 * middle))
    return AffineMap(A, mu2 - A @ mu1), max(w2, 0.0)


def gmm_log_density(spec: GmmSpec, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = spec.dim
    comps = []
    for w, m, c in zip(spec.weights, spec.means, spec.covs):
        if w == 0:
            continue
        chol = np.linalg.cholesky(c)
        z = np.linalg.solve(chol, (x - m).T)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        comps.append(np.log(w) - 0.5 * (d * np.log(2 * np.pi) + logdet + np.sum(z * z, axis=0)))
    return logsumexp(np.stack(comps), axis=0)


def true_log_ratio(spec_p: GmmSpec, spec_q: GmmSpec, x) -> np.ndarray:
    """log q(x) - log p(x)."""
    return gmm_log_density(spec_q, x) - gmm_log_density(spec_p, x)


def block_gaussian_log_ratio(cov: np.ndarray, x) -> np.ndarray:
    """log N(x; 0, I) - log N(x; 0, cov)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, logdet = np.linalg.slogdet(cov)
    quad = np.sum(x * np.linalg.solve(cov, x.T).T, axis=1)
    return -0.5 * np.sum(x * x, axis=1) + 0.5 * quad + 0.5 * logdet


def discrete_ot(batch_a, batch_b) -> tuple[np.ndarray, float]:
    """Exact squared-Euclidean assignment between equal-size point sets.

    Returns the permutation ``perm`` (a_i is matched to b_perm[i]) and the
    mean matched squared distance.
    """
    a = np.asarray(batch_a, dtype=np.float64)
    b = np.asarray(batch_b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape != b.shape:
        raise ValueError(f"discrete_ot needs equal-size batches, got {a.shape} and {b.shape}")
    if len(a) > 1024:
        raise ValueError("discrete_ot is limited to n <= 1024")
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(a), dtype=int)
    perm[rows] = cols
    return perm, float(cost[rows, cols].mean())


def true_mi(dim: int, rho: float) -> float:
    """Mutual information (nats) between odd and even coordinates of the block Gaussian."""
    if dim < 2 or dim % 2:
        raise ValueError(f"dimension must be a positive even integer, got {dim}")
    if not -1 < rho < 1:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    return -(dim / 4.0) * np.log1p(-rho * rho)

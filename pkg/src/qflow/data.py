"""Seeded synthetic samplers.

All randomness comes from numpy's counter-based Philox bit generator
keyed by ``SeedSequence(entropy=seed, spawn_key=(stream,))``; normals use
numpy's ziggurat sampler.  Shards of a parallel job use ``stream`` equal
to the shard index, so a run is reproducible from (seed, stream) alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "make_rng",
    "minibatch",
    "GmmSpec",
    "BlockGaussianSpec",
    "sample_gmm",
    "sample_two_moon",
    "sample_checkerboard",
    "sample_block_gaussian",
    "gmm_2d_pair",
    "block_gaussian_covariance",
]


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def minibatch(rng: np.random.Generator, data: np.ndarray, size: int) -> np.ndarray:
    """Rows of ``data`` drawn without replacement (with replacement if too few)."""
    n = len(data)
    idx = rng.choice(n, size, replace=False) if n >= size else rng.integers(0, n, size)
    return data[idx]


@dataclass
class GmmSpec:
    """Gaussian mixture; each covariance is a positive scalar (isotropic) or a d x d SPD matrix."""

    means: np.ndarray
    covs: list
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        k, d = self.means.shape
        if len(self.covs) != k or len(self.weights) != k:
            raise ValueError("means, covs and weights must have one entry per component")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0, atol=1e-12):
            raise ValueError(f"weights must be non-negative and sum to 1, got {self.weights}")
        covs = []
        for c in self.covs:
            c = np.asarray(c, dtype=np.float64)
            if c.ndim == 0:
                if c <= 0:
                    raise ValueError(f"covariance scalar must be positive, got {c}")
                c = float(c) * np.eye(d)
            if c.shape != (d, d):
                raise ValueError(f"covariance shape {c.shape} does not match dimension {d}")
            covs.append(c)
        self.covs = covs

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        out = np.zeros((self.dim, self.dim))
        for w, m, c in zip(self.weights, self.means, self.covs):
            out += w * (c + np.outer(m - mu, m - mu))
        return out


@dataclass(frozen=True)
class BlockGaussianSpec:
    dim: int
    rho: float

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"dimension must be a positive even integer, got {self.dim}")
        if not -1 < self.rho < 1:
            raise ValueError(f"|rho| must be < 1, got {self.rho}")


def sample_gmm(spec: GmmSpec, n: int, seed: int, stream: int = 0) -> np.ndarray:
    rng = make_rng(seed, stream)
    comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
    z = rng.standard_normal((n, spec.dim))
    out = np.empty((n, spec.dim))
    for k, (m, c) in enumerate(zip(spec.means, spec.covs)):
        sel = comp == k
        out[sel] = m + z[sel] @ np.linalg.cholesky(c).T
    return out


def gmm_2d_pair() -> tuple[GmmSpec, GmmSpec]:
    """Three-component P and two-component Q with barely overlapping supports."""
    p = GmmSpec([[-2.0, 2.0], [-1.5, 1.5], [-1.0, 1.0]], [0.75, 0.25, 0.75], np.full(3, 1 / 3))
    q = GmmSpec([[0.75, -1.5], [-2.0, -3.0]], [0.5, 0.5], [0.5, 0.5])
    return p, q


def sample_two_moon(n: int, noise: float, seed: int, stream: int = 0) -> np.ndarray:
    """Two interlocking unit half-circles, centred at the origin.

    Upper arc: (cos a - 1/2, sin a - 1/4); lower arc:
    (1/2 - cos a, 1/4 - sin a), a uniform on [0, pi].  Gaussian noise of
    standard deviation ``noise`` is added to both coordinates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, stream)
    upper = rng.random(n) < 0.5
    a = rng.uniform(0.0, np.pi, n)
    c, s = np.cos(a), np.sin(a)
    x = np.where(upper, c - 0.5, 0.5 - c)
    y = np.where(upper, s - 0.25, 0.25 - s)
    out = np.column_stack([x, y])
    if noise > 0:
        out += noise * rng.standard_normal((n, 2))
    return out


def sample_checkerboard(n: int, seed: int, stream: int = 0) -> np.ndarray:
    """Uniform over the 8 cells of the 4 x 4 unit board on [-2, 2]^2 where floor(x) + floor(y) is even."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, stream)
    cells = np.array([(i, j) for i in range(-2, 2) for j in range(-2, 2) if (i + j) % 2 == 0], dtype=float)
    pick = cells[rng.integers(0, len(cells), n)]
    return pick + rng.random((n, 2))


def block_gaussian_covariance(spec: BlockGaussianSpec) -> np.ndarray:
    cov = np.eye(spec.dim)
    for i in range(0, spec.dim, 2):
        cov[i, i + 1] = cov[i + 1, i] = spec.rho
    return cov


def sample_block_gaussian(spec: BlockGaussianSpec, n: int, seed: int, stream: int = 0) -> np.ndarray:
    """N(0, Sigma) with 2 x 2 blocks [[1, rho], [rho, 1]], sampled block by block via Cholesky."""
    rng = make_rng(seed, stream)
    z = rng.standard_normal((n, spec.dim))
    out = np.empty_like(z)
    out[:, 0::2] = z[:, 0::2]
    out[:, 1::2] = spec.rho * z[:, 0::2] + np.sqrt(1.0 - spec.rho ** 2) * z[:, 1::2]
    return out

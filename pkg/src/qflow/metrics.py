"""Map-quality and density-ratio metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .ode import inversion_error
from .ratio import RatioModel, log_ratio

__all__ = [
    "EvalReport",
    "l2_uvp",
    "cos_metric",
    "dre_mae",
    "mi_estimate",
    "total_variance",
    "inversion_error",
]

Map = Callable[[np.ndarray], np.ndarray]


@dataclass
class EvalReport:
    metric: str
    value: float
    n_samples: int
    seed: int
    config_digest: str = ""

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("EvalReport needs a positive sample count")

    def as_row(self) -> dict:
        return asdict(self)


def _apply(T, x: np.ndarray) -> np.ndarray:
    return np.asarray(T(x) if callable(T) else T, dtype=np.float64)


def total_variance(samples) -> float:
    """Trace of the empirical covariance."""
    x = np.asarray(samples, dtype=np.float64)
    return float(np.trace(np.atleast_2d(np.cov(x, rowvar=False))))


def l2_uvp(T_hat, T_star, samples, var_q: float) -> float:
    """100 * mean ||T_hat(x) - T_star(x)||^2 / Var(Q), in percent.

    Maps may be callables or precomputed image arrays.
    """
    if not var_q > 0:
        raise ValueError(f"Var(Q) must be positive, got {var_q}")
    x = np.asarray(samples, dtype=np.float64)
    diff = _apply(T_hat, x) - _apply(T_star, x)
    return float(100.0 * np.mean(np.sum(diff ** 2, axis=1)) / var_q)


def cos_metric(T_hat, T_star, samples) -> float:
    """E<T_hat(x)-x, T*(x)-x> / (E||T_hat(x)-x|| * E||T*(x)-x||)."""
    x = np.asarray(samples, dtype=np.float64)
    u = _apply(T_hat, x) - x
    v = _apply(T_star, x) - x
    denom = np.mean(np.linalg.norm(u, axis=1)) * np.mean(np.linalg.norm(v, axis=1))
    if denom <= 1e-300:
        raise ValueError("cos_metric: zero displacement (both maps are the identity)")
    return float(np.mean(np.sum(u * v, axis=1)) / denom)


def dre_mae(est_p, true_p, est_q, true_q) -> float:
    """Mean |r - r_hat| over P test points plus the same over Q test points."""
    est_p, true_p = np.asarray(est_p, dtype=np.float64), np.asarray(true_p, dtype=np.float64)
    est_q, true_q = np.asarray(est_q, dtype=np.float64), np.asarray(true_q, dtype=np.float64)
    if est_p.shape != true_p.shape or est_q.shape != true_q.shape:
        raise ValueError("dre_mae: estimate and truth arrays must be aligned")
    return float(np.mean(np.abs(est_p - true_p)) + np.mean(np.abs(est_q - true_q)))


def mi_estimate(ratio, samples_p) -> float:
    """-mean over P samples of the estimated log(Q/P).

    ``ratio`` is a :class:`~qflow.ratio.RatioModel` or a callable returning
    per-point log ratios.
    """
    x = np.asarray(samples_p, dtype=np.float64)
    r = log_ratio(ratio, x) if isinstance(ratio, RatioModel) else np.asarray(ratio(x), dtype=np.float64)
    return float(-np.mean(r))

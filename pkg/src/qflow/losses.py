"""Training objectives for the transport flow and its classifiers."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .nn import Mlp
from .ode import TimeGrid

__all__ = [
    "LossReport",
    "classifier_loss_forward",
    "classifier_loss_reverse",
    "logistic_pair_loss",
    "kl_loss",
    "w2_loss",
    "endpoint_cost",
    "interpolant_target",
    "init_matching_loss",
]


@dataclass
class LossReport:
    iteration: int
    phase: str
    kl: float
    w2: float
    total: float
    gamma: float

    def as_row(self) -> dict:
        return asdict(self)


def logistic_pair_loss(logits_neg: Value, logits_pos: Value) -> Value:
    """mean log(1+e^{z}) over the first set plus mean log(1+e^{-z}) over the second.

    The population minimizer of this loss is the log density ratio
    (second distribution over first).
    """
    return ad.add(ad.mean(ad.log1pexp(logits_neg)), ad.mean(ad.log1pexp(ad.neg(logits_pos))))


def classifier_loss_forward(c1: Mlp, pushed, targets) -> Value:
    """Logistic loss separating forward-pushed P samples from Q samples.

    ``pushed`` is detached from the flow: only the classifier receives gradient.
    """
    pushed = np.asarray(pushed.data if isinstance(pushed, Value) else pushed)
    targets = np.asarray(targets.data if isinstance(targets, Value) else targets)
    return logistic_pair_loss(c1(pushed), c1(targets))


def classifier_loss_reverse(c0: Mlp, pushed, targets) -> Value:
    """Mirror of :func:`classifier_loss_forward`: reverse-pushed Q samples against P samples."""
    return classifier_loss_forward(c0, pushed, targets)


def kl_loss(classifier: Mlp, pushed) -> Value:
    """Negative mean logit of a frozen classifier; gradient flows through ``pushed`` only."""
    return ad.neg(ad.mean(classifier.frozen()(pushed)))


def w2_loss(knots: Sequence, grid: TimeGrid, direction: str = "forward") -> Value:
    """sum_k ||x(t_k) - x(t_{k-1})||^2 / h_k averaged over samples.

    For ``direction="reverse"`` the knots are listed from t_K down to t_0.
    """
    steps = grid.steps
    if len(knots) != len(steps) + 1:
        raise ValueError(f"w2_loss: expected {len(steps) + 1} knot states, got {len(knots)}")
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown direction {direction!r}")
    if direction == "reverse":
        steps = steps[::-1]
    n = ad.as_value(knots[0]).shape[0]
    total = None
    for k, hk in enumerate(steps):
        term = ad.scale(ad.sqnorm(ad.sub(knots[k + 1], knots[k])), 1.0 / (hk * n))
        total = term if total is None else ad.add(total, term)
    return total


def endpoint_cost(knots: Sequence) -> float:
    """mean ||x_end - x_start||^2, the straight-line lower bound of :func:`w2_loss`."""
    a = ad.as_value(knots[0]).data
    b = ad.as_value(knots[-1]).data
    return float(np.mean(np.sum(np.square(b - a), axis=1)))


def interpolant_target(x0, x1, t):
    """Trigonometric interpolant and its time derivative.

    x_t = cos(pi t / 2) x0 + sin(pi t / 2) x1,
    v_t = (pi / 2) (-sin(pi t / 2) x0 + cos(pi t / 2) x1).
    ``t`` may be a scalar or one time per row.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("interpolant_target: t must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    c, s = np.cos(0.5 * np.pi * t), np.sin(0.5 * np.pi * t)
    return c * x0 + s * x1, 0.5 * np.pi * (c * x1 - s * x0)


def init_matching_loss(field, x0, x1, t) -> Value:
    """mean ||field(x_t, t) - v_t||^2 over the (x0, x1, t) triples."""
    xt, vt = interpolant_target(x0, x1, t)
    pred = field(xt, np.asarray(t, dtype=np.float64))
    return ad.scale(ad.sqnorm(ad.sub(pred, vt)), 1.0 / len(xt))

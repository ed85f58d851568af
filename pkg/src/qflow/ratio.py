"""Flow-ratio network: log density ratio as the time integral of a learned time score.

The network r(x, t) is trained so that its integral over each ratio-grid
segment [t_{k-1}, t_k] separates the bridge distributions at the two
knots by logistic regression.  Integrals use composite Simpson weights,
which is what RK4 reduces to for a state-independent integrand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .data import make_rng, minibatch
from .flow import FlowModel, check_w2_lower_bound
from .losses import w2_loss
from .nn import Adam, MlpSpec, TimeMlp, mlp_init
from .ode import TimeGrid, integrate, knot_states

log = logging.getLogger(__name__)

__all__ = [
    "RatioModel",
    "BridgeSamples",
    "ratio_knots",
    "r_quadrature",
    "segment_integrals",
    "segment_loss",
    "ratio_objective",
    "compute_bridge",
    "train_ratio",
    "log_ratio",
    "single_classifier_baseline",
]

SCHEDULES = ("uniform", "square", "sqrt")


def ratio_knots(n_segments: int, schedule: str = "uniform") -> tuple[float, ...]:
    """Knots k/L, (k/L)^2 or sqrt(k/L) for k = 0..L."""
    if n_segments < 1:
        raise ValueError(f"need at least one segment, got {n_segments}")
    u = np.arange(n_segments + 1) / n_segments
    if schedule == "uniform":
        k = u
    elif schedule == "square":
        k = u ** 2
    elif schedule == "sqrt":
        k = np.sqrt(u)
    else:
        raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
    k[0], k[-1] = 0.0, 1.0
    return tuple(float(v) for v in k)


@dataclass
class RatioModel:
    """Time-score net r(x, t) on a ratio grid; ``grid.subdivisions`` is the Simpson substep count."""

    net: TimeMlp
    grid: TimeGrid
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.net.spec.n_out != 1:
            raise ValueError("ratio net must have a single output")

    @property
    def dim(self) -> int:
        return self.net.spec.n_in - 1

    @property
    def n_segments(self) -> int:
        return self.grid.n_intervals

    @classmethod
    def create(cls, dim: int, hidden=(64, 64, 64), n_segments: int = 4, schedule: str = "uniform",
               substeps: int = 1, seed: int = 0, activation: str = "softplus", beta: float = 20.0):
        spec = MlpSpec((dim + 1, *hidden, 1), activation, beta)
        return cls(mlp_init(spec, seed, cls=TimeMlp), TimeGrid(ratio_knots(n_segments, schedule), substeps))


@dataclass
class BridgeSamples:
    """Pushed samples at every ratio knot: ``p_knots[k]`` = X_i(t_k), ``q_knots[k]`` = X~_j(t_k)."""

    p_knots: list[np.ndarray]
    q_knots: list[np.ndarray]

    def __post_init__(self):
        if len(self.p_knots) != len(self.q_knots):
            raise ValueError("bridge chains must have the same number of knots")
        if len({len(x) for x in self.p_knots}) > 1 or len({len(x) for x in self.q_knots}) > 1:
            raise ValueError("per-knot batch sizes must be constant along each chain")


def _simpson_weights(a: float, b: float, substeps: int) -> tuple[np.ndarray, np.ndarray]:
    h = (b - a) / substeps
    nodes = a + (b - a) * np.arange(2 * substeps + 1) / (2 * substeps)
    weights = np.zeros(2 * substeps + 1)
    for m in range(substeps):
        weights[2 * m:2 * m + 3] += np.array([1.0, 4.0, 1.0]) * (h / 6.0)
    return nodes, weights


def segment_integrals(net, blocks, substeps: int) -> Value:
    """Integrals over t of ``net(x, t)`` for a list of (x, a, b) blocks of equal size.

    All quadrature nodes go through the network in a single call.  Returns
    an (n_blocks, n) Value.
    """
    sizes = {len(x) for x, _, _ in blocks}
    if len(sizes) != 1:
        raise ValueError("segment_integrals: blocks must share one batch size")
    n = sizes.pop()
    q = 2 * substeps + 1
    rows, times = [], []
    wmat = np.zeros((len(blocks), len(blocks) * q))
    for i, (x, a, b) in enumerate(blocks):
        if not a < b:
            raise ValueError(f"quadrature interval must satisfy a < b, got [{a}, {b}]")
        nodes, weights = _simpson_weights(a, b, substeps)
        x = np.asarray(x, dtype=np.float64)
        for j, t in enumerate(nodes):
            rows.append(x)
            times.append(np.full(n, t))
        wmat[i, i * q:(i + 1) * q] = weights
    r = net(np.concatenate(rows), np.concatenate(times))
    return ad.matmul(wmat, ad.reshape(r, (len(blocks) * q, n)))


def _segment(net, x, a, b, substeps) -> Value:
    out = segment_integrals(net, [(x, a, b)], substeps)
    return ad.reshape(out, (out.shape[1],))


def r_quadrature(model, x, a: float, b: float, substeps: int | None = None) -> Value:
    """Integral of r(x, t) over [a, b] for each row of ``x``.

    ``model`` is a :class:`RatioModel` or any callable ``r(x, t)``.  When a
    and b are knots of the model's grid the integral is the in-order sum
    of the per-segment integrals, so segment sums telescope exactly.
    """
    if not a < b:
        raise ValueError(f"r_quadrature requires a < b, got a={a}, b={b}")
    if isinstance(model, RatioModel):
        net, S = model.net, substeps or model.grid.subdivisions
        knots = model.grid.knots
        if a in knots and b in knots:
            i, j = knots.index(a), knots.index(b)
            segs = [_segment(net, x, knots[k], knots[k + 1], S) for k in range(i, j)]
            return reduce(ad.add, segs)
        return _segment(net, x, a, b, S)
    return _segment(model, x, a, b, substeps or 1)


def log_ratio(model: RatioModel, x) -> np.ndarray:
    """Estimated log(q(x) / p(x)): the time-score integral over [0, 1]."""
    with ad.no_grad():
        return r_quadrature(model, np.asarray(x, dtype=np.float64), 0.0, 1.0).data.copy()


def _term_blocks(bridge: BridgeSamples, k: int, direction: str, idx_p, idx_q, substitute: bool):
    L = len(bridge.p_knots) - 1
    if not 1 <= k <= L:
        raise ValueError(f"segment index {k} outside 1..{L}")
    if direction == "forward":
        first = bridge.p_knots[k - 1][idx_p]
        second = bridge.q_knots[L][idx_q] if (substitute and k == L) else bridge.p_knots[k][idx_p]
    elif direction == "reverse":
        first = bridge.p_knots[0][idx_p] if (substitute and k == 1) else bridge.q_knots[k - 1][idx_q]
        second = bridge.q_knots[k][idx_q]
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return first, second


def _objective(model: RatioModel, terms) -> Value:
    """terms: list of (x, a, b, sign); loss = sum over terms of mean log(1 + e^{sign R})."""
    n = len(terms[0][0])
    R = segment_integrals(model.net, [(x, a, b) for x, a, b, _ in terms], model.grid.subdivisions)
    signs = np.array([[s] for *_, s in terms], dtype=np.float64)
    return ad.scale(ad.sum(ad.log1pexp(ad.mul(R, signs))), 1.0 / n)


def _default_index(bridge: BridgeSamples, idx_p, idx_q):
    if idx_p is None:
        idx_p = np.arange(len(bridge.p_knots[0]))
    if idx_q is None:
        idx_q = np.arange(len(bridge.q_knots[0]))
    if len(idx_p) != len(idx_q):
        raise ValueError("P and Q minibatches must have equal size")
    return idx_p, idx_q


def segment_loss(model: RatioModel, bridge: BridgeSamples, k: int, direction: str,
                 idx_p=None, idx_q=None, substitute: bool = True) -> Value:
    """Logistic loss for segment k with logit R_k (earlier knot labelled 0, later knot 1)."""
    idx_p, idx_q = _default_index(bridge, idx_p, idx_q)
    first, second = _term_blocks(bridge, k, direction, idx_p, idx_q, substitute)
    a, b = model.grid.knots[k - 1], model.grid.knots[k]
    return _objective(model, [(first, a, b, 1.0), (second, a, b, -1.0)])


def ratio_objective(model: RatioModel, bridge: BridgeSamples, idx_p=None, idx_q=None,
                    substitute: bool = True) -> Value:
    """Sum over segments of the forward and reverse segment losses."""
    idx_p, idx_q = _default_index(bridge, idx_p, idx_q)
    terms = []
    for k in range(1, model.n_segments + 1):
        a, b = model.grid.knots[k - 1], model.grid.knots[k]
        for direction in ("forward", "reverse"):
            first, second = _term_blocks(bridge, k, direction, idx_p, idx_q, substitute)
            terms += [(first, a, b, 1.0), (second, a, b, -1.0)]
    return _objective(model, terms)


def compute_bridge(flow: FlowModel | None, samples_p, samples_q, knots) -> BridgeSamples:
    """Transport all samples to every ratio knot with the frozen flow."""
    p = np.asarray(samples_p, dtype=np.float64)
    q = np.asarray(samples_q, dtype=np.float64)
    knots = tuple(knots)
    if flow is None:
        if len(knots) != 2:
            raise ValueError("a bridge without a flow only exists for a single segment")
        return BridgeSamples([p, q], [p, q])
    grid = TimeGrid(knots, flow.grid.subdivisions)
    with ad.no_grad():
        fwd = knot_states(integrate(flow.field, p, 0.0, 1.0, grid), grid)
        rev = knot_states(integrate(flow.field, q, 1.0, 0.0, grid), grid)
        check_w2_lower_bound(w2_loss(fwd, grid).item(), fwd)
        check_w2_lower_bound(w2_loss(rev, grid, "reverse").item(), rev)
    return BridgeSamples([v.data for v in fwd], [v.data for v in rev[::-1]])


def train_ratio(flow: FlowModel | None, samples_p, samples_q, model: RatioModel, iters: int,
                batch: int, seed: int, lr: float = 1e-3, substitute: bool = True) -> RatioModel:
    """Precompute the bridge once, then minimize the summed segment losses by Adam."""
    if flow is None and substitute is False:
        raise ValueError("training without a flow requires endpoint substitution")
    bridge = compute_bridge(flow, samples_p, samples_q, model.grid.knots)
    opt = Adam(model.net.params, lr=lr)
    rng = make_rng(seed, 3)
    n_p, n_q = len(bridge.p_knots[0]), len(bridge.q_knots[0])
    for it in range(iters):
        idx_p = minibatch(rng, np.arange(n_p), batch)
        idx_q = minibatch(rng, np.arange(n_q), batch)
        opt.zero_grad()
        loss = ratio_objective(model, bridge, idx_p, idx_q, substitute)
        if not np.isfinite(loss.data):
            raise ad.NonFiniteError(f"non-finite ratio loss at iteration {it}")
        ad.backward(loss)
        opt.step()
        model.history.append(loss.item())
        if it % 500 == 0:
            log.debug("ratio iter %d loss %.5f", it, loss.item())
    return model


def single_classifier_baseline(samples_p, samples_q, hidden=(64, 64, 64), iters: int = 1000,
                               batch: int = 256, seed: int = 0, lr: float = 1e-3) -> RatioModel:
    """One logistic classifier between P and Q with the flow-ratio architecture and budget."""
    p = np.asarray(samples_p, dtype=np.float64)
    model = RatioModel.create(p.shape[1], hidden, n_segments=1, seed=seed)
    return train_ratio(None, samples_p, samples_q, model, iters, batch, seed, lr)

"""Q-flow pipeline: interpolant initialization and bi-directional refinement.

The refinement alternates, per outer iteration, a forward block that
pushes P samples through [0, 1] and a reverse block that pulls Q samples
back through [1, 0].  Each flow update minimizes the classifier-based KL
estimate plus ``gamma`` times the discrete W2 cost; logistic classifiers
are retrained on freshly pushed samples after every flow change.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import make_rng, minibatch as _batch
from .losses import (
    LossReport,
    classifier_loss_forward,
    classifier_loss_reverse,
    endpoint_cost,
    init_matching_loss,
    kl_loss,
    w2_loss,
)
from .nn import Adam, Mlp, MlpSpec, TimeMlp, mlp_init
from .ode import TimeGrid, integrate, knot_states

log = logging.getLogger(__name__)

__all__ = [
    "FlowModel",
    "RefineConfig",
    "InvariantError",
    "init_flow",
    "refine",
    "push",
    "check_w2_lower_bound",
]


class InvariantError(RuntimeError):
    """A mathematical invariant was violated during training."""


@dataclass
class FlowModel:
    field: TimeMlp
    grid: TimeGrid

    def __post_init__(self):
        if self.field.spec.n_out != self.field.spec.n_in - 1:
            raise ValueError(f"velocity field must map d+1 -> d inputs, got {self.field.spec.layer_widths}")

    @property
    def dim(self) -> int:
        return self.field.spec.n_out

    def copy(self) -> "FlowModel":
        return FlowModel(self.field.copy(), self.grid)


@dataclass
class RefineConfig:
    gamma: float = 0.5
    tot: int = 1
    epochs: int = 100
    e0: int = 200
    e_in: int = 4
    batch_flow: int = 256
    batch_clf: int = 256
    lr_flow: float = 1e-3
    lr_clf: float = 1e-3
    classifier_hidden: tuple[int, ...] = (64, 64, 64)
    classifier_activation: str = "softplus"
    classifier_beta: float = 20.0
    classifier_every: int = 1
    bidirectional: bool = True
    warm_start_iters: int = 0
    seed: int = 0

    def __post_init__(self):
        self.classifier_hidden = tuple(int(w) for w in self.classifier_hidden)
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.tot < 0:
            raise ValueError(f"tot must be >= 0, got {self.tot}")
        for name in ("epochs", "e0", "e_in", "batch_flow", "batch_clf", "classifier_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr_flow < 0 or self.lr_clf < 0:
            raise ValueError("learning rates must be non-negative")
        if self.warm_start_iters < 0:
            raise ValueError("warm_start_iters must be >= 0")


def check_w2_lower_bound(w2: float, knots) -> float:
    """Raise unless ``w2 >= mean ||x_end - x_start||^2``; returns the bound."""
    floor = endpoint_cost(knots)
    if w2 < floor * (1.0 - 1e-10) - 1e-12:
        raise InvariantError(f"W2 loss {w2!r} fell below its endpoint lower bound {floor!r}")
    return floor


def _check_samples(samples_p, samples_q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(samples_p, dtype=np.float64)
    q = np.asarray(samples_q, dtype=np.float64)
    if p.ndim != 2 or q.ndim != 2 or len(p) == 0 or len(q) == 0:
        raise ValueError("sample sets must be non-empty (n, d) arrays")
    if p.shape[1] != q.shape[1]:
        raise ValueError(f"P and Q dimensions differ: {p.shape[1]} vs {q.shape[1]}")
    if not (np.isfinite(p).all() and np.isfinite(q).all()):
        raise ValueError("sample sets contain NaN or infinite values")
    if len(p) == 1 or len(q) == 1:
        warnings.warn("single-sample input: KL estimates are meaningless at this size", stacklevel=3)
    return p, q


def init_flow(samples_p, samples_q, spec: MlpSpec, grid: TimeGrid, steps: int, seed: int,
              batch: int = 256, lr: float = 1e-3) -> FlowModel:
    """Fit the velocity field to the trigonometric interpolant between independent P/Q draws."""
    p, q = _check_samples(samples_p, samples_q)
    if spec.n_in != p.shape[1] + 1 or spec.n_out != p.shape[1]:
        raise ValueError(f"spec {spec.layer_widths} does not fit dimension {p.shape[1]}")
    field_net = mlp_init(spec, seed, cls=TimeMlp)
    opt = Adam(field_net.params, lr=lr)
    rng = make_rng(seed, 1)
    for step in range(steps):
        x0 = _batch(rng, p, batch)
        x1 = _batch(rng, q, batch)
        t = rng.uniform(0.0, 1.0, size=batch)
        opt.zero_grad()
        loss = init_matching_loss(field_net, x0, x1, t)
        ad.backward(loss)
        opt.step()
        if step % 500 == 0:
            log.debug("init step %d loss %.5f", step, loss.item())
    return FlowModel(field_net, grid)


def push(flow: FlowModel, x, direction: str = "forward") -> np.ndarray:
    """Terminal states of forward (0 -> 1) or reverse (1 -> 0) integration."""
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown direction {direction!r}")
    s, t = (0.0, 1.0) if direction == "forward" else (1.0, 0.0)
    with ad.no_grad():
        return integrate(flow.field, np.asarray(x, dtype=np.float64), s, t, flow.grid).terminal.data


def _push_on(field_net, x, grid, direction) -> np.ndarray:
    s, t = (0.0, 1.0) if direction == "forward" else (1.0, 0.0)
    with ad.no_grad():
        return integrate(field_net, x, s, t, grid).terminal.data


class _Classifier:
    def __init__(self, dim: int, cfg: RefineConfig, seed: int):
        spec = MlpSpec((dim, *cfg.classifier_hidden, 1), cfg.classifier_activation, cfg.classifier_beta)
        self.net: Mlp = mlp_init(spec, seed)
        self.opt = Adam(self.net.params, lr=cfg.lr_clf)

    def train(self, pushed_pool: np.ndarray, targets: np.ndarray, steps: int, batch: int,
              rng: np.random.Generator, reverse: bool) -> float:
        loss_fn = classifier_loss_reverse if reverse else classifier_loss_forward
        loss = None
        for _ in range(steps):
            self.opt.zero_grad()
            loss = loss_fn(self.net, _batch(rng, pushed_pool, batch), _batch(rng, targets, batch))
            ad.backward(loss)
            self.opt.step()
        return float("nan") if loss is None else loss.item()


def refine(flow: FlowModel, samples_p, samples_q, cfg: RefineConfig) -> tuple[FlowModel, list[LossReport]]:
    """Bi-directional refinement; returns a refined copy of ``flow`` and one report per flow update."""
    p, q = _check_samples(samples_p, samples_q)
    flow = flow.copy()
    history: list[LossReport] = []
    if cfg.tot == 0:
        return flow, history

    field_net = flow.field
    opt = Adam(field_net.params, lr=cfg.lr_flow)
    rng = make_rng(cfg.seed, 2)
    c1 = _Classifier(flow.dim, cfg, seed=cfg.seed * 2 + 11)
    c0 = _Classifier(flow.dim, cfg, seed=cfg.seed * 2 + 12)
    coarse = TimeGrid(flow.grid.knots, 1)

    directions = [("forward", c1, p, q)]
    if cfg.bidirectional:
        directions.append(("reverse", c0, q, p))

    for it in range(1, cfg.tot + 1):
        grid = coarse if it <= cfg.warm_start_iters else flow.grid
        for direction, clf, source, target in directions:
            reverse = direction == "reverse"
            epoch = -1
            try:
                if it == 1:
                    pool = _push_on(field_net, _batch(rng, source, min(len(source), 8192)), grid, direction)
                    clf.train(pool, target, cfg.e0, cfg.batch_clf, rng, reverse)
                for epoch in range(cfg.epochs):
                    history.append(_flow_update(field_net, opt, clf.net, source, grid, cfg, rng,
                                                direction, it, epoch))
                    if (epoch + 1) % cfg.classifier_every == 0:
                        pool = _push_on(field_net, _batch(rng, source, cfg.batch_clf), grid, direction)
                        clf.train(pool, target, cfg.e_in, cfg.batch_clf, rng, reverse)
            except ad.NonFiniteError as exc:
                where = "classifier warm-up" if epoch < 0 else f"epoch {epoch}"
                raise ad.NonFiniteError(f"{exc} [iteration {it}, {direction} phase, {where}]") from exc
            log.info("iter %d %s: kl=%.4f w2=%.4f", it, direction, history[-1].kl, history[-1].w2)
    return flow, history


def _flow_update(field_net: TimeMlp, opt: Adam, classifier: Mlp, source: np.ndarray, grid: TimeGrid,
                 cfg: RefineConfig, rng: np.random.Generator, direction: str, it: int,
                 epoch: int) -> LossReport:
    x = _batch(rng, source, cfg.batch_flow)
    s, t = (0.0, 1.0) if direction == "forward" else (1.0, 0.0)
    with ad.Tape() as tape:
        traj = integrate(field_net, x, s, t, grid)
        knots = knot_states(traj, grid)
        w2 = w2_loss(knots, grid, direction)
        kl = kl_loss(classifier, knots[-1])
        total = ad.add(kl, ad.scale(w2, cfg.gamma))
        if not np.isfinite(total.data):
            raise ad.NonFiniteError(f"non-finite loss at iteration {it}, {direction} epoch {epoch}")
        check_w2_lower_bound(w2.item(), knots)
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        tape.reset()
    return LossReport(it, direction, kl.item(), w2.item(), total.item(), cfg.gamma)

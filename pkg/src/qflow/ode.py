"""Fixed-grid RK4 integration of time-dependent velocity fields.

A field is any callable ``field(x, t) -> Value`` with ``x`` an (n, d)
batch and ``t`` a scalar time.  Integration runs forward (0 -> 1) or in
reverse (1 -> 0) with negative steps on the same field; every fine-grid
state is recorded so losses can be built from intermediate knots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Value

Field = Callable[[Value, float], Value]

__all__ = [
    "TimeGrid",
    "Trajectory",
    "rk4_step",
    "integrate",
    "knot_states",
    "inversion_error",
]


@dataclass(frozen=True)
class TimeGrid:
    """Coarse knots 0 = t_0 < ... < t_K = 1, each interval split into ``subdivisions`` RK4 steps."""

    knots: tuple[float, ...]
    subdivisions: int = 4

    def __post_init__(self):
        knots = tuple(float(t) for t in self.knots)
        object.__setattr__(self, "knots", knots)
        if len(knots) < 2:
            raise ValueError("TimeGrid needs at least two knots")
        if knots[0] != 0.0 or knots[-1] != 1.0:
            raise ValueError(f"TimeGrid endpoints must be exactly 0 and 1, got {knots[0]} and {knots[-1]}")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise ValueError(f"TimeGrid knots must be strictly increasing: {knots}")
        if int(self.subdivisions) < 1:
            raise ValueError(f"subdivisions must be >= 1, got {self.subdivisions}")
        object.__setattr__(self, "subdivisions", int(self.subdivisions))

    @classmethod
    def uniform(cls, n_intervals: int, subdivisions: int = 4) -> "TimeGrid":
        if n_intervals < 1:
            raise ValueError(f"need at least one interval, got {n_intervals}")
        knots = [k / n_intervals for k in range(n_intervals + 1)]
        knots[-1] = 1.0
        return cls(tuple(knots), subdivisions)

    @property
    def n_intervals(self) -> int:
        return len(self.knots) - 1

    @property
    def steps(self) -> np.ndarray:
        """Interval lengths h_k."""
        return np.diff(np.asarray(self.knots))

    def fine_times(self) -> np.ndarray:
        S = self.subdivisions
        out = [self.knots[0]]
        for a, b in zip(self.knots, self.knots[1:]):
            h = (b - a) / S
            out += [a + j * h for j in range(1, S)] + [b]
        return np.asarray(out)

    def knot_index(self, t: float) -> int:
        try:
            return self.knots.index(float(t))
        except ValueError:
            raise ValueError(f"time {t} is not a knot of {self.knots}") from None

    def to_dict(self) -> dict:
        return {"knots": list(self.knots), "subdivisions": self.subdivisions}

    @classmethod
    def from_dict(cls, d: dict) -> "TimeGrid":
        return cls(tuple(d["knots"]), int(d["subdivisions"]))


@dataclass
class Trajectory:
    times: np.ndarray
    states: list[Value]
    direction: str
    grid: TimeGrid
    start: int
    stop: int

    @property
    def terminal(self) -> Value:
        return self.states[-1]

    def stacked(self) -> np.ndarray:
        """States as an array of shape (n_times, n_samples, d)."""
        return np.stack([s.data for s in self.states])


def rk4_step(field: Field, x, t: float, h: float) -> Value:
    """Classical four-stage Runge-Kutta step of size ``h`` (negative to go backward)."""
    if h == 0:
        raise ValueError("rk4_step: step size must be nonzero")
    x = ad.as_value(x)
    half = 0.5 * h
    k1 = field(x, t)
    k2 = field(x + ad.scale(k1, half), t + half)
    k3 = field(x + ad.scale(k2, half), t + half)
    k4 = field(x + ad.scale(k3, h), t + h)
    incr = ad.add(ad.add(k1, ad.scale(k2, 2.0)), ad.add(ad.scale(k3, 2.0), k4))
    out = x + ad.scale(incr, h / 6.0)
    if not np.isfinite(out.data).all():
        raise NonFiniteError(f"non-finite state while integrating from t={t:g} to t={t + h:g}")
    return out


def integrate(field: Field, x0, s: float, t: float, grid: TimeGrid) -> Trajectory:
    """Integrate from knot ``s`` to knot ``t`` through every fine step between them.

    The terminal state realizes the solution map from time s to time t.
    """
    i0, i1 = grid.knot_index(s), grid.knot_index(t)
    if i0 == i1:
        raise ValueError("integrate: start and end times must differ")
    x = ad.as_value(x0)
    fine = grid.fine_times()
    S = grid.subdivisions
    lo, hi = i0 * S, i1 * S
    idx = range(lo, hi + 1) if hi > lo else range(lo, hi - 1, -1)
    idx = list(idx)
    states = [x]
    for a, b in zip(idx, idx[1:]):
        x = rk4_step(field, x, fine[a], fine[b] - fine[a])
        states.append(x)
    return Trajectory(fine[idx], states, "forward" if hi > lo else "reverse", grid, i0, i1)


def knot_states(traj: Trajectory, grid: TimeGrid) -> list[Value]:
    """States at the coarse knots visited by ``traj``, in integration order."""
    if traj.grid != grid:
        raise ValueError("knot_states: trajectory was produced on a different grid")
    S = grid.subdivisions
    return traj.states[::S]


def inversion_error(field: Field, grid: TimeGrid, samples_p, samples_q) -> float:
    """Mean squared round-trip error forward-then-back on P plus back-then-forward on Q."""
    with ad.no_grad():
        xp = np.asarray(samples_p, dtype=np.float64)
        xq = np.asarray(samples_q, dtype=np.float64)
        if len(xp) == 0 or len(xq) == 0:
            raise ValueError("inversion_error: empty batch")
        fwd = integrate(field, xp, 0.0, 1.0, grid).terminal
        back = integrate(field, fwd, 1.0, 0.0, grid).terminal.data
        rev = integrate(field, xq, 1.0, 0.0, grid).terminal
        again = integrate(field, rev, 0.0, 1.0, grid).terminal.data
    err_p = np.mean(np.sum(np.square(back - xp), axis=1))
    err_q = np.mean(np.sum(np.square(again - xq), axis=1))
    return float(err_p + err_q)

"""Multilayer perceptrons and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Value

__all__ = ["MlpSpec", "Mlp", "TimeMlp", "Adam", "mlp_init", "mlp_forward", "adam_step"]

ACTIVATIONS = ("softplus", "relu")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "softplus"
    beta: float = 20.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError(f"MlpSpec needs at least 2 widths, got {widths}")
        if any(w <= 0 for w in widths):
            raise ValueError(f"MlpSpec widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if not self.beta > 0:
            raise ValueError(f"softplus beta must be positive, got {self.beta}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]

    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": self.activation, "beta": self.beta}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), d.get("activation", "softplus"), float(d.get("beta", 20.0)))


class Mlp:
    """Fully connected network; hidden layers use the spec activation, the last is linear.

    Weights are stored as (out, in) matrices.
    """

    def __init__(self, spec: MlpSpec, weights: Sequence[Value], biases: Sequence[Value]):
        self.spec = spec
        self.weights = list(weights)
        self.biases = list(biases)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (spec.layer_widths[i + 1], spec.layer_widths[i])
            if w.shape != expect or b.shape != (expect[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with {spec}")

    @property
    def params(self) -> list[Value]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x) -> Value:
        return mlp_forward(self, x)

    def frozen(self) -> "Mlp":
        """View of the same parameters that receives no gradient."""
        return type(self)._from_parts(self, [Value(w.data) for w in self.weights],
                                      [Value(b.data) for b in self.biases])

    @classmethod
    def _from_parts(cls, like: "Mlp", weights, biases) -> "Mlp":
        return cls(like.spec, weights, biases)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.spec.n_params():
            raise ValueError(f"expected {self.spec.n_params()} parameters, got {flat.size}")
        pos = 0
        for p in self.params:
            n = p.data.size
            p.data[...] = flat[pos:pos + n].reshape(p.data.shape)
            pos += n

    def copy(self) -> "Mlp":
        clone = mlp_init(self.spec, 0, cls=type(self))
        clone.set_flat(self.get_flat())
        return clone


class TimeMlp(Mlp):
    """MLP evaluated on ``[x, t]`` with the time appended as the last input column.

    ``n_evals`` counts evaluated rows, i.e. per-sample function evaluations.
    """

    def __init__(self, spec: MlpSpec, weights, biases):
        super().__init__(spec, weights, biases)
        self.n_evals = 0

    @property
    def dim(self) -> int:
        return self.spec.n_in - 1

    def __call__(self, x, t) -> Value:
        x = ad.as_value(x)
        n = x.shape[0]
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
        self.n_evals += n
        return mlp_forward(self, ad.concat([x, Value(np.ascontiguousarray(tcol))], axis=1))


def mlp_init(spec: MlpSpec, seed: int, cls: type = Mlp) -> Mlp:
    """Kaiming-uniform hidden weights (bound sqrt(6 / fan_in)), zero biases.

    The output layer uses the smaller bound sqrt(1 / fan_in).
    """
    rng = np.random.Generator(np.random.Philox(seed))
    weights, biases = [], []
    w = spec.layer_widths
    for i in range(len(w) - 1):
        bound = np.sqrt(6.0 / w[i])
        if i == len(w) - 2:
            bound = np.sqrt(1.0 / w[i])
        weights.append(ad.parameter(rng.uniform(-bound, bound, size=(w[i + 1], w[i])), name=f"W{i}"))
        biases.append(ad.parameter(np.zeros(w[i + 1]), name=f"b{i}"))
    return cls(spec, weights, biases)


def mlp_forward(net: Mlp, x) -> Value:
    x = ad.as_value(x)
    if x.data.ndim != 2 or x.shape[1] != net.spec.n_in:
        raise ValueError(f"mlp_forward: input shape {x.shape} does not match input width {net.spec.n_in}")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = ad.linear(h, w, b)
        if i < last:
            h = ad.softplus(h, net.spec.beta) if net.spec.activation == "softplus" else ad.relu(h)
    return h


@dataclass
class Adam:
    """Adam with bias correction over a list of parameter leaves."""

    params: list[Value]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)

    def step(self) -> None:
        adam_step(self)


def adam_step(opt: Adam, grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update in place; ``grads`` defaults to ``p.grad``."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in opt.params]
    for i, (p, g) in enumerate(zip(opt.params, grads)):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or i}")
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for p, g, m, v in zip(opt.params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        p.data -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)

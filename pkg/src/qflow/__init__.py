"""Dynamic optimal transport between sampled distributions with flow networks."""

from .data import make_rng
from .flow import FlowModel, RefineConfig, init_flow, push, refine
from .nn import Adam, Mlp, MlpSpec, TimeMlp, mlp_init
from .ode import TimeGrid, integrate, inversion_error, knot_states
from .ratio import RatioModel, log_ratio, train_ratio

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "FlowModel",
    "Mlp",
    "MlpSpec",
    "RatioModel",
    "RefineConfig",
    "TimeGrid",
    "TimeMlp",
    "init_flow",
    "integrate",
    "inversion_error",
    "knot_states",
    "log_ratio",
    "make_rng",
    "mlp_init",
    "push",
    "refine",
    "train_ratio",
]

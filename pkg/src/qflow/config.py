"""Run configuration: YAML files with one section per pipeline stage.

A run is fully described by a :class:`RunConfig`.  Values are layered as
preset or file, then environment (``QFLOW_SEED``, ``QFLOW_THREADS``),
then explicit command-line overrides, with later layers winning.  The
digest is a hash of the canonical JSON form and is stamped into every
output file.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .data import (
    BlockGaussianSpec,
    block_gaussian_covariance,
    gmm_2d_pair,
    make_rng,
    sample_block_gaussian,
    sample_checkerboard,
    sample_gmm,
    sample_two_moon,
)
from . import oracle
from .flow import RefineConfig
from .io import read_points
from .nn import MlpSpec
from .ode import TimeGrid
from .ratio import SCHEDULES, ratio_knots

__all__ = [
    "ConfigError",
    "RunConfig",
    "TASKS",
    "PRESETS",
    "load_config",
    "load_preset",
    "apply_overrides",
    "make_task_data",
    "true_log_ratio_fn",
    "shift_vector",
]

TASKS = ("gaussian-shift", "gmm-2d", "moon-checkerboard", "mi-gaussian", "custom")
PRESETS = ("gaussian-shift", "gmm-2d", "moon-checkerboard", "mi-gaussian")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class DataConfig:
    n_train: int = 4000
    n_test: int = 4096
    dim: int = 2
    shift: float = 5.0
    rho: float = 0.8
    noise: float = 0.05
    p_path: str | None = None
    q_path: str | None = None


@dataclass
class FlowConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "softplus"
    beta: float = 20.0
    intervals: int = 5
    subdivisions: int = 4

    def spec(self, dim: int) -> MlpSpec:
        return MlpSpec((dim + 1, *self.hidden, dim), self.activation, self.beta)

    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.intervals, self.subdivisions)


@dataclass
class InitConfig:
    steps: int = 2000
    batch: int = 256
    lr: float = 1e-3


@dataclass
class RefineSection:
    gamma: float = 0.5
    tot: int = 1
    epochs: int = 100
    e0: int = 200
    e_in: int = 4
    batch_flow: int = 256
    batch_clf: int = 256
    lr_flow: float = 1e-4
    lr_clf: float = 1e-3
    classifier_hidden: list = field(default_factory=lambda: [64, 64])
    classifier_activation: str = "softplus"
    classifier_beta: float = 20.0
    classifier_every: int = 1
    bidirectional: bool = True
    warm_start_iters: int = 0

    def build(self, seed: int) -> RefineConfig:
        return RefineConfig(**asdict(self), seed=seed)


@dataclass
class RatioSection:
    segments: int = 4
    schedule: str = "uniform"
    substeps: int = 1
    hidden: list = field(default_factory=lambda: [64, 64, 64])
    activation: str = "softplus"
    beta: float = 20.0
    iters: int = 2000
    batch: int = 256
    lr: float = 1e-3
    substitute: bool = True


@dataclass
class EvalSection:
    n_samples: int = 16384
    ot_pairs: int = 256
    traj_samples: int = 64


SECTIONS = {
    "data": DataConfig,
    "flow": FlowConfig,
    "init": InitConfig,
    "refine": RefineSection,
    "ratio": RatioSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    task: str = "gaussian-shift"
    seed: int = 0
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    init: InitConfig = field(default_factory=InitConfig)
    refine: RefineSection = field(default_factory=RefineSection)
    ratio: RatioSection = field(default_factory=RatioSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        top = {f.name for f in fields(cls)}
        unknown = set(raw) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, value in raw.items():
            if key in SECTIONS:
                kw[key] = _section(SECTIONS[key], key, value or {})
            else:
                kw[key] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything that can change results (thread count excluded)."""
        d = self.to_dict()
        d.pop("threads")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def refine_config(self) -> RefineConfig:
        return self.refine.build(self.seed)

    def validate(self) -> None:
        """Check every field against the preconditions of the stage that consumes it."""
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        _positive_int(self.threads, "threads")
        d = self.data
        for name in ("n_train", "n_test", "dim"):
            _positive_int(getattr(d, name), f"data.{name}")
        if self.task in ("gmm-2d", "moon-checkerboard") and d.dim != 2:
            raise ConfigError(f"task {self.task} is two-dimensional, got data.dim={d.dim}")
        if self.task == "mi-gaussian":
            try:
                BlockGaussianSpec(d.dim, d.rho)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.task == "custom" and not (d.p_path and d.q_path):
            raise ConfigError("task custom needs data.p_path and data.q_path")
        if d.noise < 0:
            raise ConfigError("data.noise must be >= 0")
        for section, build in (("flow", lambda: (self.flow.spec(d.dim), self.flow.grid())),
                               ("refine", self.refine_config),
                               ("ratio", lambda: ratio_knots(self.ratio.segments, self.ratio.schedule))):
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}: {exc}") from None
        _positive_int(self.init.steps, "init.steps")
        _positive_int(self.init.batch, "init.batch")
        if self.init.lr <= 0:
            raise ConfigError("init.lr must be > 0")
        if self.ratio.lr <= 0:
            raise ConfigError("ratio.lr must be > 0")
        if self.ratio.schedule not in SCHEDULES:
            raise ConfigError(f"ratio.schedule must be one of {SCHEDULES}")
        for name in ("substeps", "iters", "batch"):
            _positive_int(getattr(self.ratio, name), f"ratio.{name}")
        try:
            MlpSpec((d.dim + 1, *self.ratio.hidden, 1), self.ratio.activation, self.ratio.beta)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"ratio: {exc}") from None
        for name in ("n_samples", "ot_pairs", "traj_samples"):
            _positive_int(getattr(self.eval, name), f"eval.{name}")
        if self.eval.ot_pairs > 1024:
            raise ConfigError("eval.ot_pairs is limited to 1024")


def _positive_int(value, name: str) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")


def _section(cls, name: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    kw = dict(raw)
    for f in fields(cls):
        if f.type == "float" and f.name in kw:
            kw[f.name] = _as_float(kw[f.name], f"{name}.{f.name}")
    return cls(**kw)


def _as_float(value, name: str) -> float:
    # YAML 1.1 reads exponent-only literals such as 1e-4 as strings
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if not np.isfinite(out):
        raise ConfigError(f"{name} must be finite, got {value!r}")
    return out


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    text = resources.files("qflow").joinpath("presets", f"{name}.yaml").read_text()
    return yaml.safe_load(text)


def _set_path(raw: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def apply_overrides(raw: dict, overrides=(), seed=None, threads=None, env=None) -> dict:
    """Layer environment variables and ``key.path=value`` overrides onto a raw dict."""
    env = os.environ if env is None else env
    raw = json.loads(json.dumps(raw or {}))
    for var, key in (("QFLOW_SEED", "seed"), ("QFLOW_THREADS", "threads")):
        if env.get(var):
            try:
                raw[key] = int(env[var])
            except ValueError:
                raise ConfigError(f"{var} must be an integer, got {env[var]!r}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {item!r}: {exc}") from None
        _set_path(raw, key.strip(), value)
    if seed is not None:
        raw["seed"] = seed
    if threads is not None:
        raw["threads"] = threads
    return raw


def load_config(path=None, preset=None, overrides=(), seed=None, threads=None, env=None) -> RunConfig:
    if path is not None and preset is not None:
        raise ConfigError("give either a config file or a preset, not both")
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    elif preset is not None:
        raw = load_preset(preset)
    else:
        raw = {}
    return RunConfig.from_dict(apply_overrides(raw, overrides, seed, threads, env))


def make_task_data(cfg: RunConfig) -> dict[str, np.ndarray]:
    """Train and test splits for P and Q.  Each split uses its own RNG stream."""
    d, seed = cfg.data, cfg.seed
    n_tr, n_te = d.n_train, d.n_test
    if cfg.task == "gaussian-shift":
        shift = shift_vector(cfg)

        def draw(n, stream, offset):
            return make_rng(seed, stream).standard_normal((n, d.dim)) + offset

        out = {"p_train": draw(n_tr, 10, 0.0), "q_train": draw(n_tr, 11, shift),
               "p_test": draw(n_te, 12, 0.0), "q_test": draw(n_te, 13, shift)}
    elif cfg.task == "gmm-2d":
        sp, sq = gmm_2d_pair()
        out = {"p_train": sample_gmm(sp, n_tr, seed, 10), "q_train": sample_gmm(sq, n_tr, seed, 11),
               "p_test": sample_gmm(sp, n_te, seed, 12), "q_test": sample_gmm(sq, n_te, seed, 13)}
    elif cfg.task == "moon-checkerboard":
        out = {"p_train": sample_two_moon(n_tr, d.noise, seed, 10),
               "q_train": sample_checkerboard(n_tr, seed, 11),
               "p_test": sample_two_moon(n_te, d.noise, seed, 12),
               "q_test": sample_checkerboard(n_te, seed, 13)}
    elif cfg.task == "mi-gaussian":
        spec = BlockGaussianSpec(d.dim, d.rho)
        out = {"p_train": sample_block_gaussian(spec, n_tr, seed, 10),
               "q_train": make_rng(seed, 11).standard_normal((n_tr, d.dim)),
               "p_test": sample_block_gaussian(spec, n_te, seed, 12),
               "q_test": make_rng(seed, 13).standard_normal((n_te, d.dim))}
    else:
        p, q = read_points(d.p_path), read_points(d.q_path)
        if p.shape[1] != d.dim or q.shape[1] != d.dim:
            raise ConfigError(f"custom data dimension does not match data.dim={d.dim}")
        out = {"p_train": p, "q_train": q, "p_test": p, "q_test": q}
    return out


def true_log_ratio_fn(cfg: RunConfig):
    """Closed-form log(q/p) for tasks that have one, else None."""
    if cfg.task == "gmm-2d":
        sp, sq = gmm_2d_pair()
        return lambda x: oracle.true_log_ratio(sp, sq, x)
    if cfg.task == "mi-gaussian":
        cov = block_gaussian_covariance(BlockGaussianSpec(cfg.data.dim, cfg.data.rho))
        return lambda x: oracle.block_gaussian_log_ratio(cov, x)
    if cfg.task == "gaussian-shift":
        m = shift_vector(cfg)
        return lambda x: np.atleast_2d(x) @ m - 0.5 * m @ m
    return None


def shift_vector(cfg: RunConfig) -> np.ndarray:
    m = np.zeros(cfg.data.dim)
    m[0] = cfg.data.shift
    return m

"""Versioned JSON-text checkpoints with hexadecimal float parameters.

``float.hex`` text is exact, so a save/load round trip reproduces every
parameter bit for bit on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .flow import FlowModel
from .nn import Mlp, MlpSpec, TimeMlp, mlp_init
from .ode import TimeGrid
from .ratio import RatioModel

__all__ = ["Checkpoint", "CheckpointError", "save", "load", "from_model", "to_model"]

FORMAT = "qflow-checkpoint"
VERSION = 1
KINDS = ("flow", "classifier", "ratio")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    spec: MlpSpec
    params: np.ndarray
    grid: TimeGrid | None = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")
        if self.version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {self.version}")
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params(),):
            raise CheckpointError(
                f"parameter count {self.params.size} does not match spec ({self.spec.n_params()})")
        if self.kind != "classifier" and self.grid is None:
            raise CheckpointError(f"{self.kind} checkpoint needs a time grid")

    def to_json(self) -> str:
        doc = {
            "format": FORMAT,
            "version": self.version,
            "kind": self.kind,
            "spec": self.spec.to_dict(),
            "grid": None if self.grid is None else self.grid.to_dict(),
            "n_params": int(self.params.size),
            "params": [float(v).hex() for v in self.params],
            "meta": self.meta,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"not a checkpoint: {exc}") from None
        if not isinstance(doc, dict) or doc.get("format") != FORMAT:
            raise CheckpointError("not a qflow checkpoint")
        try:
            params = np.array([float.fromhex(v) for v in doc["params"]], dtype=np.float64)
            if params.size != doc["n_params"]:
                raise CheckpointError("n_params disagrees with the stored parameter list")
            grid = None if doc["grid"] is None else TimeGrid.from_dict(doc["grid"])
            return cls(doc["kind"], MlpSpec.from_dict(doc["spec"]), params, grid,
                       doc.get("meta", {}), doc["version"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc!r}") from None


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(ckpt.to_json())


def load(path) -> Checkpoint:
    return Checkpoint.from_json(Path(path).read_text())


def from_model(model, meta: dict | None = None) -> Checkpoint:
    """Snapshot a FlowModel, RatioModel or plain classifier Mlp."""
    if isinstance(model, FlowModel):
        return Checkpoint("flow", model.field.spec, model.field.get_flat(), model.grid, dict(meta or {}))
    if isinstance(model, RatioModel):
        return Checkpoint("ratio", model.net.spec, model.net.get_flat(), model.grid, dict(meta or {}))
    if isinstance(model, Mlp):
        return Checkpoint("classifier", model.spec, model.get_flat(), None, dict(meta or {}))
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def to_model(ckpt: Checkpoint):
    cls = Mlp if ckpt.kind == "classifier" else TimeMlp
    net = mlp_init(ckpt.spec, 0, cls=cls)
    net.set_flat(ckpt.params)
    if ckpt.kind == "flow":
        return FlowModel(net, ckpt.grid)
    if ckpt.kind == "ratio":
        return RatioModel(net, ckpt.grid)
    return net

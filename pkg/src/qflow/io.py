"""CSV input and output for point sets, trajectories and metric reports.

Every file written here starts with a ``# config_digest=...`` comment
line.  Floats are written with 17 significant digits, which round-trips
float64 exactly.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

__all__ = ["write_points", "read_points", "write_trajectory", "write_rows", "read_rows"]

FLOAT_FMT = "%.17g"


def _open(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.open("w", newline="")


def write_points(path, x, digest: str = "", extra: dict | None = None) -> None:
    """Write an (n, d) array with header x_1..x_d, plus optional named 1-D columns."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    header = [f"x_{i + 1}" for i in range(x.shape[1])]
    cols = [x]
    for name, col in (extra or {}).items():
        header.append(name)
        cols.append(np.asarray(col, dtype=np.float64).reshape(-1, 1))
    with _open(path) as fh:
        fh.write(f"# config_digest={digest}\n")
        np.savetxt(fh, np.hstack(cols), delimiter=",", fmt=FLOAT_FMT, header=",".join(header), comments="")


def read_points(path) -> np.ndarray:
    """Read the x_* columns of a point CSV (comment lines skipped)."""
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#") and ln.strip()]
    if not lines:
        raise ValueError(f"{path}: no header found")
    header = lines[0].strip().split(",")
    keep = [i for i, h in enumerate(header) if h.startswith("x_")]
    if not keep:
        raise ValueError(f"{path}: no x_* columns in header {header}")
    if len(lines) == 1:
        raise ValueError(f"{path}: no data rows")
    data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
    return data[:, keep]


def write_trajectory(path, times, states, digest: str = "") -> None:
    """Rows (sample_id, t, x_1..x_d), one per sample and fine-grid time, sample-major."""
    states = np.asarray(states, dtype=np.float64)  # (n_times, n, d)
    n_times, n, d = states.shape
    ids = np.repeat(np.arange(n), n_times)
    t = np.tile(np.asarray(times, dtype=np.float64), n)
    xs = states.transpose(1, 0, 2).reshape(n * n_times, d)
    header = ["sample_id", "t"] + [f"x_{i + 1}" for i in range(d)]
    with _open(path) as fh:
        fh.write(f"# config_digest={digest}\n")
        fh.write(",".join(header) + "\n")
        for i, ti, row in zip(ids, t, xs):
            fh.write(f"{i}," + ",".join(FLOAT_FMT % v for v in (ti, *row)) + "\n")


def write_rows(path, rows: list[dict], digest: str = "") -> None:
    """Generic dict rows (metric reports, loss logs) as CSV."""
    with _open(path) as fh:
        fh.write(f"# config_digest={digest}\n")
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (FLOAT_FMT % v if isinstance(v, float) else v) for k, v in row.items()})


def read_rows(path) -> list[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))

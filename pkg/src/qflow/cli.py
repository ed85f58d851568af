"""Command-line front end: ``qflow <subcommand> [options]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numeric
failure (non-finite values or a violated invariant), 4 file I/O.  Errors
are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import io
from .config import ConfigError, RunConfig, load_config, make_task_data, shift_vector, true_log_ratio_fn
from .flow import InvariantError, init_flow, push, refine
from .losses import w2_loss
from .metrics import EvalReport, cos_metric, dre_mae, l2_uvp, mi_estimate, total_variance
from .ode import integrate, inversion_error, knot_states
from .oracle import discrete_ot, gaussian_ot_map, true_mi
from .ratio import RatioModel, log_ratio, single_classifier_baseline, train_ratio

log = logging.getLogger("qflow")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
SPLITS = ("p_train", "q_train", "p_test", "q_test")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    return load_config(args.config, args.preset, args.set or (), args.seed, args.threads)


def _meta(cfg: RunConfig, stage: str) -> dict:
    return {"seed": cfg.seed, "config_digest": cfg.digest(), "task": cfg.task, "stage": stage}


def _data(cfg: RunConfig, data_dir) -> dict[str, np.ndarray]:
    if data_dir is None:
        return make_task_data(cfg)
    return {name: io.read_points(Path(data_dir) / f"{name}.csv") for name in SPLITS}


def _load(path, kind: str):
    ck = ckpt_io.load(path)
    if ck.kind != kind:
        raise ConfigError(f"{path} holds a {ck.kind} checkpoint, expected {kind}")
    return ck, ckpt_io.to_model(ck)


def _check_dim(model_dim: int, x: np.ndarray, what: str) -> None:
    if x.shape[1] != model_dim:
        raise ConfigError(f"{what} has dimension {x.shape[1]} but the model expects {model_dim}")


def _write_reports(out_dir: Path, name: str, reports: list[EvalReport], digest: str) -> None:
    rows = [r.as_row() for r in reports]
    io.write_rows(out_dir / f"{name}.csv", rows, digest)
    (out_dir / f"{name}.json").write_text(json.dumps(rows, indent=1) + "\n")
    for r in reports:
        print(f"{r.metric}\t{r.value:.6g}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig) -> None:
    data = make_task_data(cfg)
    for name in SPLITS:
        io.write_points(args.out_dir / f"{name}.csv", data[name], cfg.digest())
    log.info("wrote %s to %s", ", ".join(SPLITS), args.out_dir)


def cmd_init_flow(args, cfg: RunConfig) -> None:
    data = _data(cfg, args.data)
    flow = init_flow(data["p_train"], data["q_train"], cfg.flow.spec(data["p_train"].shape[1]),
                     cfg.flow.grid(), cfg.init.steps, cfg.seed, cfg.init.batch, cfg.init.lr)
    out = args.output or args.out_dir / "flow_init.json"
    ckpt_io.save(ckpt_io.from_model(flow, _meta(cfg, "init")), out)
    log.info("saved initialized flow to %s", out)


def cmd_refine(args, cfg: RunConfig) -> None:
    _, flow = _load(args.flow, "flow")
    data = _data(cfg, args.data)
    _check_dim(flow.dim, data["p_train"], "training data")
    rcfg = cfg.refine_config()
    refined, history = refine(flow, data["p_train"], data["q_train"], rcfg)
    if rcfg.tot == 0:
        log.info("refine: tot=0, checkpoint copied unchanged")
    out = args.output or args.out_dir / "flow_refined.json"
    ckpt_io.save(ckpt_io.from_model(refined, _meta(cfg, "refine")), out)
    io.write_rows(args.out_dir / "refine_log.csv", [h.as_row() for h in history], cfg.digest())


def cmd_train_ratio(args, cfg: RunConfig) -> None:
    data = _data(cfg, args.data)
    p, q = data["p_train"], data["q_train"]
    r = cfg.ratio
    if args.baseline:
        model = single_classifier_baseline(p, q, tuple(r.hidden), r.iters, r.batch, cfg.seed, r.lr)
    else:
        if args.flow is None:
            raise ConfigError("train-ratio needs --flow (or --baseline)")
        _, flow = _load(args.flow, "flow")
        _check_dim(flow.dim, p, "training data")
        model = RatioModel.create(p.shape[1], tuple(r.hidden), r.segments, r.schedule, r.substeps,
                                  cfg.seed, r.activation, r.beta)
        train_ratio(flow, p, q, model, r.iters, r.batch, cfg.seed, r.lr, r.substitute)
    out = args.output or args.out_dir / "ratio.json"
    ckpt_io.save(ckpt_io.from_model(model, _meta(cfg, "ratio")), out)


def cmd_eval_ot(args, cfg: RunConfig) -> None:
    _, flow = _load(args.flow, "flow")
    data = _data(cfg, args.data)
    x = data["p_test"][: cfg.eval.n_samples]
    _check_dim(flow.dim, x, "evaluation data")
    n, digest = len(x), cfg.digest()
    with ad.no_grad():
        knots = knot_states(integrate(flow.field, x, 0.0, 1.0, flow.grid), flow.grid)
        w2 = w2_loss(knots, flow.grid).item()
    T = knots[-1].data
    reports = [
        EvalReport("w2_loss", w2, n, cfg.seed, digest),
        EvalReport("transport_cost", float(np.mean(np.sum((T - x) ** 2, axis=1))), n, cfg.seed, digest),
    ]
    if cfg.task == "gaussian-shift":
        m = shift_vector(cfg)
        eye = np.eye(cfg.data.dim)
        t_star, w2sq = gaussian_ot_map(np.zeros_like(m), eye, m, eye)
        reports += [
            EvalReport("cos", cos_metric(T, t_star, x), n, cfg.seed, digest),
            EvalReport("l2_uvp", l2_uvp(T, t_star, x, total_variance(data["q_test"])), n, cfg.seed, digest),
            EvalReport("analytic_w2sq", w2sq, n, cfg.seed, digest),
        ]
    k = min(cfg.eval.ot_pairs, len(data["p_test"]), len(data["q_test"]))
    _, cost = discrete_ot(data["p_test"][:k], data["q_test"][:k])
    reports.append(EvalReport("discrete_ot_cost", cost, k, cfg.seed, digest))
    m_inv = min(len(x), 4096)
    inv = inversion_error(flow.field, flow.grid, x[:m_inv], data["q_test"][:m_inv])
    reports.append(EvalReport("inversion_error", inv, m_inv, cfg.seed, digest))
    _write_reports(args.out_dir, "eval_ot", reports, digest)


def cmd_eval_dre(args, cfg: RunConfig) -> None:
    _, model = _load(args.ratio, "ratio")
    digest = cfg.digest()
    truth = true_log_ratio_fn(cfg)
    if args.points is not None:
        x = io.read_points(args.points)
        _check_dim(model.dim, x, "points")
        extra = {"log_ratio": log_ratio(model, x)}
        if truth is not None:
            extra["true_log_ratio"] = truth(x)
        io.write_points(args.out_dir / "log_ratio.csv", x, digest, extra)
        return
    data = _data(cfg, args.data)
    xp, xq = data["p_test"], data["q_test"]
    _check_dim(model.dim, xp, "evaluation data")
    est_p, est_q = log_ratio(model, xp), log_ratio(model, xq)
    io.write_points(args.out_dir / "log_ratio.csv", np.vstack([xp, xq]), digest,
                    {"log_ratio": np.concatenate([est_p, est_q])})
    if truth is None:
        raise ConfigError(f"task {cfg.task} has no closed-form ratio; pass --points to only export estimates")
    mae = dre_mae(est_p, truth(xp), est_q, truth(xq))
    _write_reports(args.out_dir, "eval_dre", [EvalReport("mae", mae, len(xp) + len(xq), cfg.seed, digest)], digest)


def cmd_eval_mi(args, cfg: RunConfig) -> None:
    if cfg.task != "mi-gaussian":
        raise ConfigError("eval-mi requires the mi-gaussian task")
    _, model = _load(args.ratio, "ratio")
    data = _data(cfg, args.data)
    x = data["p_test"][: cfg.eval.n_samples]
    _check_dim(model.dim, x, "evaluation data")
    digest = cfg.digest()
    reports = [EvalReport("mi_estimate", mi_estimate(model, x), len(x), cfg.seed, digest),
               EvalReport("true_mi", true_mi(cfg.data.dim, cfg.data.rho), len(x), cfg.seed, digest)]
    _write_reports(args.out_dir, "eval_mi", reports, digest)


def cmd_export_traj(args, cfg: RunConfig) -> None:
    _, flow = _load(args.flow, "flow")
    if args.points is not None:
        x = io.read_points(args.points)
    else:
        split = "p_test" if args.direction == "forward" else "q_test"
        x = _data(cfg, args.data)[split][: cfg.eval.traj_samples]
    _check_dim(flow.dim, x, "points")
    s, t = (0.0, 1.0) if args.direction == "forward" else (1.0, 0.0)
    with ad.no_grad():
        traj = integrate(flow.field, x, s, t, flow.grid)
    io.write_trajectory(args.out_dir / "trajectory.csv", traj.times, traj.stacked(), cfg.digest())


def cmd_inspect(args, cfg=None) -> None:
    ck = ckpt_io.load(args.checkpoint)
    p = ck.params
    summary = {
        "kind": ck.kind,
        "version": ck.version,
        "layer_widths": list(ck.spec.layer_widths),
        "activation": ck.spec.activation,
        "n_params": int(p.size),
        "grid": None if ck.grid is None else ck.grid.to_dict(),
        "param_norm": float(np.linalg.norm(p)),
        "meta": ck.meta,
    }
    print(json.dumps(summary, indent=1))


COMMANDS = {
    "gen-data": (cmd_gen_data, "sample the task's train/test splits to CSV"),
    "init-flow": (cmd_init_flow, "fit the velocity field to the interpolant"),
    "refine": (cmd_refine, "bi-directional refinement of a flow checkpoint"),
    "train-ratio": (cmd_train_ratio, "train the flow-ratio network (or the one-classifier baseline)"),
    "eval-ot": (cmd_eval_ot, "transport metrics of a flow"),
    "eval-dre": (cmd_eval_dre, "log-ratio estimates and MAE"),
    "eval-mi": (cmd_eval_mi, "mutual information estimate"),
    "export-traj": (cmd_export_traj, "fine-grid trajectories to CSV"),
    "inspect": (cmd_inspect, "print a checkpoint summary"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="YAML run configuration")
    src.add_argument("--preset", help="built-in preset: gaussian-shift, gmm-2d, moon-checkerboard, mi-gaussian")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. refine.gamma=0.1 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS threads (default 1)")
    common.add_argument("--out-dir", type=Path, default=Path("."))
    common.add_argument("--data", type=Path, help="directory of CSVs written by gen-data")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="qflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("refine", "eval-ot", "export-traj"):
            p.add_argument("--flow", type=Path, required=True, help="flow checkpoint")
        if name == "train-ratio":
            p.add_argument("--flow", type=Path, help="flow checkpoint")
            p.add_argument("--baseline", action="store_true", help="single classifier without a flow")
        if name in ("eval-dre", "eval-mi"):
            p.add_argument("--ratio", type=Path, required=True, help="ratio checkpoint")
        if name in ("eval-dre", "export-traj"):
            p.add_argument("--points", type=Path, help="CSV of query points (x_1..x_d columns)")
        if name == "export-traj":
            p.add_argument("--direction", choices=("forward", "reverse"), default="forward")
        if name in ("init-flow", "refine", "train-ratio"):
            p.add_argument("--output", type=Path, help="checkpoint path")
        if name == "inspect":
            p.add_argument("checkpoint", type=Path)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        if args.command == "inspect":
            func(args)
            return 0
        cfg = _config(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=cfg.threads):
            func(args, cfg)
    except (ad.NonFiniteError, InvariantError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except ckpt_io.CheckpointError as exc:
        return _fail(EXIT_IO, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())

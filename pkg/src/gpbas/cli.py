"""Command-line entry point: data generation, GP training, LQR/DDP synthesis, simulation, verification."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import zlib
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .barrier import BarrierConfig, EmbeddedModel, quantile_phi
from .control import (
    AffinePolicy,
    DdpOptions,
    LqrGains,
    LqrPolicy,
    ddp_optimize,
    gpbas_lqr,
    rollout_policy,
)
from .environments import (
    ENV_NAMES,
    column_names,
    gp_training_set,
    generate_training_data,
    load_dataset_csv,
    make_env,
    save_dataset_csv,
)
from .errors import GpBasError, InvalidArgumentError, NumericalError, SolverStalledError
from .gp import CONTINUOUS, load_model, predict, save_model, train_gp
from .uncertainty import mc_rollout

logger = logging.getLogger("gpbas")

OUTPUT_ROOT_VAR = "GPBAS_OUTPUT_ROOT"

EXIT_OK, EXIT_USAGE, EXIT_STALLED, EXIT_NUMERICAL = 0, 2, 3, 4

DEFAULTS = {
    "env": "linear",
    "course": None,
    "seed": 0,
    "output_dir": None,
    "mode": CONTINUOUS,
    "data_count": None,
    "gp_subsample": None,
    "gp_iters": 200,
    "dynamics": "gp",
    "gamma": 1.0,
    "dbas_gamma": 0.0,
    "phi": None,
    "rho": None,
    "barrier_weight": None,
    "combine": "sum",
    "horizon": None,
    "dt": None,
    "epsilon": 1e-4,
    "max_iters": 100,
    "reg_init": 0.0,
    "reg_max": 1e6,
    "alpha_min": 2.0 ** -10,
    "samples": 2000,
    "data": None,
    "model": None,
    "solution": None,
}

# hyperparameter optimization runs on a subsample for the large quadrotor set
ENV_SUBSAMPLE = {"quadrotor": 300}


class UsageError(Exception):
    pass


def substream_seed(seed: int, name: str) -> int:
    """Independent integer seed for a named component (data, validation, hyperopt, mc)."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def load_schema() -> dict:
    return json.loads(resources.files("gpbas").joinpath("config.schema.json").read_text())


def build_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {args.config}: {err}") from None
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "config"
        raise UsageError(f"invalid configuration at {where}: {err.message}") from None
    if cfg["phi"] is not None and cfg["rho"] is not None:
        raise UsageError("give either phi or rho, not both")
    return cfg


def output_dir(cfg) -> Path:
    out = Path(cfg["output_dir"] or f"runs/{cfg['env']}")
    root = os.environ.get(OUTPUT_ROOT_VAR)
    if root and not out.is_absolute():
        out = Path(root) / out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out}: {err.strerror}") from None
    return out


def _env(cfg):
    env = make_env(cfg["env"], cfg["course"])
    changes = {}
    if cfg["dt"] is not None:
        changes["dt"] = cfg["dt"]
    if cfg["horizon"] is not None:
        changes["horizon"] = cfg["horizon"]
    return dataclasses.replace(env, **changes) if changes else env


def _phi(cfg) -> float:
    if cfg["rho"] is not None:
        return quantile_phi(cfg["rho"])
    return 0.0 if cfg["phi"] is None else float(cfg["phi"])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _default_path(cfg, key, out, name) -> Path:
    return Path(cfg[key]) if cfg[key] else out / name


def _dynamics(cfg, env, out):
    if cfg["dynamics"] == "true":
        return env.exact_dynamics(), None
    path = _default_path(cfg, "model", out, "model.json")
    if not path.exists():
        raise UsageError(f"model file {path} not found (run `train` first or pass --model)")
    gp, meta = load_model(path)
    if meta.get("env", env.name) != env.name:
        raise UsageError(f"model {path} was trained on {meta.get('env')}, not {env.name}")
    return env.gp_dynamics(gp), meta


def _embedded(cfg, env, dynamics) -> EmbeddedModel:
    config = env.barrier_config(phi=_phi(cfg), gamma=cfg["gamma"], dbas_gamma=cfg["dbas_gamma"],
                                combine=cfg["combine"])
    return EmbeddedModel(dynamics, env.safety, config, env.dt)


def trajectory_rows(model: EmbeddedModel, cost, states, controls):
    """Rows ``t, x.., z.., u.., h_min, cost_to_go``; the last row has empty controls."""
    n, q, m = model.n, model.q, model.m
    stage = cost.stage_costs(states, controls)
    ctg = np.cumsum(stage[::-1])[::-1]
    h = model.safety.min_h(states[:, :n])
    header = (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"z_{i + 1}" for i in range(q)]
              + [f"u_{j + 1}" for j in range(m)] + ["h_min", "cost_to_go"])
    rows = []
    for k in range(len(states)):
        u = [repr(float(v)) for v in controls[k]] if k < len(controls) else [""] * m
        rows.append([repr(round(k * model.dt, 12))] + [repr(float(v)) for v in states[k]] + u
                    + [repr(float(h[k])), repr(float(ctg[k]))])
    return header, rows


def write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _distance_to_boundary(env, states) -> float:
    """Smallest Euclidean gap between a circle obstacle and the trajectory (nan without circles)."""
    gaps = [np.min(np.linalg.norm(states[:, list(c.indices)] - c.center, axis=1) - c.radius)
            for c in env.safety.constraints if hasattr(c, "center")]
    return float(min(gaps)) if gaps else float("nan")


def _replay_metrics(env, model, policy, xbar0, horizon):
    ro_model = rollout_policy(model, policy, xbar0, horizon)
    ro_true = rollout_policy(model, policy, xbar0, horizon, true_step=env.step)
    final = ro_true.states[-1, : env.state_dim]
    return ro_model, ro_true, {
        "min_h_model": ro_model.min_h,
        "min_h_true": ro_true.min_h,
        "violation_step_true": ro_true.violation_step,
        "min_distance_true": _distance_to_boundary(env, ro_true.states),
        "final_goal_error_true": float(np.linalg.norm(final - env.goal)),
        "final_position_error_true": float(np.linalg.norm(final[:3] - env.goal[:3])
                                           if env.name == "quadrotor" else np.linalg.norm(final[:2] - env.goal[:2])),
    }


def _solution_header(cfg, env, model):
    return {"env": env.name, "course": env.course, "phi": model.config.phi, "gamma": model.config.gamma,
            "dbas_gamma": model.config.dbas_gamma, "combine": model.config.combine, "dt": env.dt,
            "horizon": env.horizon, "dynamics": cfg["dynamics"], "barrier_weight": cfg["barrier_weight"]}


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(cfg, out: Path) -> int:
    env = _env(cfg)
    data = generate_training_data(env, substream_seed(cfg["seed"], "data"), cfg["mode"], cfg["data_count"])
    path = _default_path(cfg, "data", out, "data.csv")
    save_dataset_csv(data, path, column_names(env))
    _write_json(path.with_suffix(".json"), {
        "env": env.name, "course": env.course, "seed": cfg["seed"], "mode": data.mode,
        "recipe": env.recipe, "rows": data.size, "columns": column_names(env),
    })
    logger.info("wrote %d rows to %s", data.size, path)
    return EXIT_OK


def cmd_train(cfg, out: Path) -> int:
    env = _env(cfg)
    path = _default_path(cfg, "data", out, "data.csv")
    if not path.exists():
        raise UsageError(f"dataset {path} not found")
    data = load_dataset_csv(path, env.state_dim + env.control_dim, cfg["mode"])
    train_set = gp_training_set(env, data)
    subsample = cfg["gp_subsample"] or ENV_SUBSAMPLE.get(env.name)
    gp = train_gp(train_set, iters=cfg["gp_iters"], subsample=subsample, seed=substream_seed(cfg["seed"], "hyperopt"))
    val_count = min(int(env.recipe.get("count", 200)), 300)
    val = gp_training_set(env, generate_training_data(env, substream_seed(cfg["seed"], "validation"), cfg["mode"],
                                                      None if env.recipe["kind"] == "sinusoid" else val_count))

    def rmse(ds):
        mean = predict(gp, ds.inputs, return_var=False)
        return np.sqrt(np.mean((mean - ds.targets) ** 2, axis=0))

    meta = {
        "env": env.name, "course": env.course, "seed": cfg["seed"], "rows": data.size,
        "hyperopt_subsample": subsample, "iters": cfg["gp_iters"],
        "train_rmse": rmse(train_set).tolist(), "validation_rmse": rmse(val).tolist(),
        "validation_target_std": val.targets.std(axis=0).tolist(),
        "gp_rows": list(env.gp_rows) if env.gp_rows else list(range(env.state_dim)),
    }
    save_model(gp, _default_path(cfg, "model", out, "model.json"), meta)
    logger.info("validation RMSE %s", np.round(meta["validation_rmse"], 6).tolist())
    return EXIT_OK


def cmd_lqr(cfg, out: Path) -> int:
    env = _env(cfg)
    dyn, _ = _dynamics(cfg, env, out)
    model = _embedded(cfg, env, dyn)
    cost = env.cost(model.config, cfg["barrier_weight"])
    gains = gpbas_lqr(model, cost, env.discretization, env.u_ref)
    policy = LqrPolicy(gains, cost.goal, env.u_ref)
    xbar0 = model.initial_state(env.x0)
    ro_model, ro_true, metrics = _replay_metrics(env, model, policy, xbar0, env.horizon)
    header, rows = trajectory_rows(model, cost, ro_model.states, ro_model.controls)
    write_csv(out / "trajectory.csv", header, rows)
    header, rows = trajectory_rows(model, cost, ro_true.states, ro_true.controls)
    write_csv(out / "trajectory_true.csv", header, rows)
    metrics.update(final_cost=cost.total(ro_model.states, ro_model.controls) if ro_model.safe else None,
                   iterations=gains.iterations, phi=model.config.phi)
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "cost_history.json", [metrics["final_cost"]])
    sol = _solution_header(cfg, env, model)
    sol.update(kind="lqr", K=gains.K.tolist(), P=gains.P.tolist(), goal=cost.goal.tolist(), u_ref=env.u_ref.tolist())
    _write_json(out / "solution.json", sol)
    return EXIT_OK


def _write_ddp(out, cfg, env, model, cost, sol):
    header, rows = trajectory_rows(model, cost, sol.states, sol.controls)
    write_csv(out / "trajectory.csv", header, rows)
    _write_json(out / "cost_history.json", sol.cost_history)
    doc = _solution_header(cfg, env, model)
    doc.update(kind="ddp", states=sol.states.tolist(), controls=sol.controls.tolist(), gains=sol.gains.tolist(),
               converged=sol.converged, delta_v=sol.delta_v, iterations=sol.iterations)
    _write_json(out / "solution.json", doc)


def cmd_ddp(cfg, out: Path) -> int:
    env = _env(cfg)
    dyn, _ = _dynamics(cfg, env, out)
    model = _embedded(cfg, env, dyn)
    cost = env.cost(model.config, cfg["barrier_weight"])
    opts = DdpOptions(max_iters=cfg["max_iters"], epsilon=cfg["epsilon"], reg_init=cfg["reg_init"],
                      reg_max=cfg["reg_max"], alpha_min=cfg["alpha_min"])
    u_init = np.tile(env.u_ref, (env.horizon, 1))
    code = EXIT_OK
    try:
        sol = ddp_optimize(model, cost, env.x0, u_init, opts)
    except SolverStalledError as err:
        logger.error("%s; writing best-so-far solution", err)
        sol, code = err.solution, EXIT_STALLED
        if sol is None:
            return code
    _write_ddp(out, cfg, env, model, cost, sol)
    _, _, metrics = _replay_metrics(env, model, sol.policy(), sol.states[0], env.horizon)
    metrics["min_h_model"] = float(np.min(model.safety.min_h(sol.states[:, : model.n])))
    metrics["min_distance_model"] = _distance_to_boundary(env, sol.states[:, : model.n])
    metrics.update(final_cost=sol.cost, iterations=sol.iterations, converged=sol.converged,
                   delta_v=sol.delta_v, phi=model.config.phi)
    _write_json(out / "metrics.json", metrics)
    if code == EXIT_OK and not sol.converged:
        logger.warning("DDP hit max_iters without meeting epsilon")
        code = EXIT_STALLED
    return code


def _load_solution(cfg, out):
    path = _default_path(cfg, "solution", out, "solution.json")
    if not path.exists():
        raise UsageError(f"solution file {path} not found")
    doc = json.loads(path.read_text())
    if doc.get("env") != cfg["env"]:
        raise UsageError(f"solution {path} is for env {doc.get('env')!r}, config says {cfg['env']!r}")
    return doc


def _model_from_solution(cfg, env, doc, dynamics):
    config = BarrierConfig(gamma=doc["gamma"], dbas_gamma=doc["dbas_gamma"], phi=doc["phi"],
                           combine=doc["combine"], shift_point=env.goal)
    return EmbeddedModel(dynamics, env.safety, config, env.dt)


def _policy_from_solution(doc, model):
    if doc["kind"] == "lqr":
        return LqrPolicy(LqrGains(np.array(doc["K"]), np.array(doc["P"])), doc["goal"], doc["u_ref"])
    return AffinePolicy(doc["states"], doc["controls"], doc["gains"])


def _solution_env(cfg, doc):
    cfg = dict(cfg, course=doc["course"], dt=doc["dt"], horizon=doc["horizon"])
    return _env(cfg)


def cmd_simulate(cfg, out: Path) -> int:
    doc = _load_solution(cfg, out)
    env = _solution_env(cfg, doc)
    dyn, _ = _dynamics(dict(cfg, dynamics=doc["dynamics"]), env, out)
    model = _model_from_solution(cfg, env, doc, dyn)
    policy = _policy_from_solution(doc, model)
    cost = env.cost(model.config, doc.get("barrier_weight"))
    true_step = env.step if cfg["dynamics"] == "true" else None
    ro = rollout_policy(model, policy, model.initial_state(env.x0), env.horizon, true_step=true_step)
    header, rows = trajectory_rows(model, cost, ro.states, ro.controls[: len(ro.states) - 1])
    write_csv(out / f"simulate_{cfg['dynamics']}.csv", header, rows)
    _write_json(out / f"simulate_{cfg['dynamics']}.json", {
        "dynamics": cfg["dynamics"], "min_h": ro.min_h, "violation_step": ro.violation_step,
        "steps": len(ro.states) - 1, "min_distance": _distance_to_boundary(env, ro.states),
    })
    return EXIT_OK


def cmd_verify(cfg, out: Path) -> int:
    doc = _load_solution(cfg, out)
    env = _solution_env(cfg, doc)
    dyn, _ = _dynamics(dict(cfg, dynamics=doc["dynamics"]), env, out)
    model = _model_from_solution(cfg, env, doc, dyn)
    policy = _policy_from_solution(doc, model)
    rho = cfg["rho"]
    report = mc_rollout(model, policy, env.x0, env.horizon, cfg["samples"], substream_seed(cfg["seed"], "mc"), rho=rho)
    _write_json(out / "report.json", report.to_dict())
    logger.info("fraction safe %.4f (95%% CI %.4f-%.4f)", report.fraction_safe, report.ci_low, report.ci_high)
    return EXIT_OK


def cmd_export(cfg, out: Path) -> int:
    doc = _load_solution(cfg, out)
    env = _solution_env(cfg, doc)
    dyn = env.exact_dynamics()
    model = _model_from_solution(cfg, env, doc, dyn)
    cost = env.cost(model.config, doc.get("barrier_weight"))
    if doc["kind"] == "ddp":
        states, controls = np.array(doc["states"]), np.array(doc["controls"])
    else:
        dyn, _ = _dynamics(dict(cfg, dynamics=doc["dynamics"]), env, out)
        model = _model_from_solution(cfg, env, doc, dyn)
        ro = rollout_policy(model, _policy_from_solution(doc, model), model.initial_state(env.x0), env.horizon)
        states, controls = ro.states, ro.controls
    header, rows = trajectory_rows(model, cost, states, controls)
    write_csv(out / "export.csv", header, rows)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "lqr": cmd_lqr,
    "ddp": cmd_ddp,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--env", choices=ENV_NAMES)
    common.add_argument("--course")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir", dest="output_dir",
                        help=f"output directory (relative paths resolve under ${OUTPUT_ROOT_VAR} if set)")
    common.add_argument("--mode", choices=["continuous-derivative", "discrete-delta"])
    common.add_argument("--data-count", dest="data_count", type=int)
    common.add_argument("--gp-subsample", dest="gp_subsample", type=int)
    common.add_argument("--gp-iters", dest="gp_iters", type=int)
    common.add_argument("--dynamics", choices=["gp", "true"])
    common.add_argument("--gamma", type=float)
    common.add_argument("--dbas-gamma", dest="dbas_gamma", type=float)
    common.add_argument("--phi", type=float)
    common.add_argument("--rho", type=float)
    common.add_argument("--barrier-weight", dest="barrier_weight", type=float)
    common.add_argument("--combine", choices=["sum", "per-constraint"])
    common.add_argument("--horizon", type=int)
    common.add_argument("--dt", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--max-iters", dest="max_iters", type=int)
    common.add_argument("--reg-init", dest="reg_init", type=float)
    common.add_argument("--reg-max", dest="reg_max", type=float)
    common.add_argument("--alpha-min", dest="alpha_min", type=float)
    common.add_argument("--samples", type=int)
    common.add_argument("--data")
    common.add_argument("--model")
    common.add_argument("--solution")
    common.add_argument("--timing", action="store_true", help="also write wall-clock time to timing.json")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="gpbas", description="Safe control with Gaussian-process barrier states.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate a training dataset for an environment",
        "train": "fit GP dynamics (hyperparameters + exact posterior)",
        "lqr": "safety-embedded LQR stabilization",
        "ddp": "safety-embedded DDP trajectory optimization",
        "simulate": "replay a solution on the GP model or the true dynamics",
        "verify": "Monte Carlo safety verification of a solution",
        "export": "export a solution trajectory as CSV",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        out = output_dir(cfg)
        start = time.perf_counter()
        code = COMMANDS[args.command](cfg, out)
        if args.timing:
            _write_json(out / "timing.json", {"command": args.command, "wall_time_s": time.perf_counter() - start})
        return code
    except UsageError as err:
        print(f"gpbas: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidArgumentError as err:
        print(f"gpbas: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"gpbas: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SolverStalledError as err:
        print(f"gpbas: solver stalled: {err}", file=sys.stderr)
        return EXIT_STALLED
    except NumericalError as err:
        levels = f" (jitter levels tried: {err.jitter_levels})" if err.jitter_levels else ""
        print(f"gpbas: numerical failure: {err}{levels}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GpBasError as err:
        print(f"gpbas: failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

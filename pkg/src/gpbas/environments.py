"""Benchmark environments: true dynamics, constraints, costs and training-data recipes.

Course layouts live in versioned JSON files under ``gpbas/courses``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np

from .barrier import BarrierConfig, EmbeddedModel, SafetyFunction, bas_count
from .control import QuadraticCost, dare_solve, discretize
from .dynamics import ExactDynamics, GpDynamics, GreyBoxDynamics
from .errors import InvalidArgumentError
from .gp import CONTINUOUS, DISCRETE, Dataset, GpModel

logger = logging.getLogger(__name__)

COURSES = {
    ("linear", "default"): "linear.json",
    ("dubins", "single"): "dubins_single.json",
    ("dubins", "multi"): "dubins_multi.json",
    ("quadrotor", "default"): "quadrotor.json",
}
ENV_NAMES = ("linear", "dubins", "quadrotor")


def load_course(env: str, course: str | None = None) -> dict:
    if env not in ENV_NAMES:
        raise InvalidArgumentError(f"unknown environment {env!r}; valid: {', '.join(ENV_NAMES)}")
    course = course or ("single" if env == "dubins" else "default")
    key = (env, course)
    if key not in COURSES:
        valid = sorted(c for e, c in COURSES if e == env)
        raise InvalidArgumentError(f"unknown course {course!r} for {env}; valid: {', '.join(valid)}")
    text = resources.files("gpbas.courses").joinpath(COURSES[key]).read_text()
    return json.loads(text)


def rk4_step(f, X, U, dt):
    """One classical Runge-Kutta step of ``xdot = f(X, U)`` for a batch (zero-order-hold control)."""
    k1 = f(X, U)
    k2 = f(X + 0.5 * dt * k1, U)
    k3 = f(X + 0.5 * dt * k2, U)
    k4 = f(X + dt * k3, U)
    return X + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True, eq=False)
class Environment:
    """One benchmark: ground-truth vector field, safe set, cost weights and data recipe.

    ``f(X, U)`` is batched (M x n, M x m -> M x n); ``jac(x, u)`` returns the
    analytic ``(df/dx, df/du)``.
    """

    name: str
    course: str
    state_dim: int
    control_dim: int
    f: Callable
    jac: Callable
    dt: float
    horizon: int
    safety: SafetyFunction
    x0: np.ndarray
    goal: np.ndarray
    u_ref: np.ndarray
    weights: dict
    recipe: dict
    discretization: str = "euler"
    gp_rows: tuple | None = None
    known: Callable | None = None
    known_jac: Callable | None = None
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("x0", "goal", "u_ref"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not self.safety.is_safe(self.x0) or not self.safety.is_safe(self.goal):
            raise InvalidArgumentError(f"{self.name}: x0 and goal must be strictly safe")

    def true_dynamics(self, x, u) -> np.ndarray:
        return self.f(np.asarray(x, float)[None], np.asarray(u, float)[None])[0]

    def step(self, x, u, dt=None) -> np.ndarray:
        dt = self.dt if dt is None else dt
        return rk4_step(self.f, np.asarray(x, float)[None], np.asarray(u, float)[None], dt)[0]

    def simulate(self, x0, controls, dt=None) -> np.ndarray:
        xs = [np.asarray(x0, float)]
        for u in controls:
            xs.append(self.step(xs[-1], u, dt))
        return np.array(xs)

    def exact_dynamics(self, mode=CONTINUOUS):
        """Zero-variance dynamics: the true vector field, or the exact RK4 delta in discrete mode."""
        if mode == CONTINUOUS:
            return ExactDynamics(self.f, self.jac, self.state_dim, self.control_dim, CONTINUOUS)
        if mode != DISCRETE:
            raise InvalidArgumentError(f"unknown mode {mode!r}")

        def delta(X, U):
            return rk4_step(self.f, X, U, self.dt) - X

        def delta_jac(x, u, eps=1e-6):
            n, m = self.state_dim, self.control_dim
            fx, fu = np.empty((n, n)), np.empty((n, m))
            for i in range(n):
                e = np.zeros(n)
                e[i] = eps
                fx[:, i] = (delta(x[None] + e, u[None]) - delta(x[None] - e, u[None]))[0] / (2 * eps)
            for j in range(m):
                e = np.zeros(m)
                e[j] = eps
                fu[:, j] = (delta(x[None], u[None] + e) - delta(x[None], u[None] - e))[0] / (2 * eps)
            return fx, fu

        return ExactDynamics(delta, delta_jac, self.state_dim, self.control_dim, DISCRETE)

    def gp_dynamics(self, gp: GpModel):
        """Wrap a trained GP; grey-box environments stitch it with their known rows."""
        if self.gp_rows is None or gp.output_dim == self.state_dim:
            return GpDynamics(gp, self.state_dim)
        return GreyBoxDynamics(gp, self.state_dim, self.gp_rows, self.known, self.known_jac)

    def barrier_config(self, phi=0.0, gamma=1.0, dbas_gamma=0.0, combine="sum", shift=True) -> BarrierConfig:
        return BarrierConfig(gamma=gamma, dbas_gamma=dbas_gamma, phi=phi, combine=combine,
                             shift_point=self.goal if shift else None)

    def embedded_model(self, dynamics=None, config: BarrierConfig | None = None, **kwargs) -> EmbeddedModel:
        dynamics = self.exact_dynamics() if dynamics is None else dynamics
        config = config or self.barrier_config(**kwargs)
        return EmbeddedModel(dynamics, self.safety, config, self.dt)

    def cost(self, config: BarrierConfig | None = None, barrier_weight: float | None = None) -> QuadraticCost:
        """Quadratic cost on the embedded state ``[x; z]`` with goal ``[goal; 0]``."""
        config = config or self.barrier_config()
        q = bas_count(self.safety, config)
        bw = self.weights.get("barrier_weight", 1e-3) if barrier_weight is None else barrier_weight
        Q = np.diag(np.concatenate([self.weights["Q"], np.full(q, bw)]))
        Qf = np.diag(np.concatenate([self.weights.get("Qf", self.weights["Q"]), np.full(q, bw)]))
        R = np.diag(np.asarray(self.weights["R"], dtype=float))
        return QuadraticCost(Q, R, Qf, np.concatenate([self.goal, np.zeros(q)]), self.u_ref)


# -- linear system ----------------------------------------------------------------

LINEAR_A = np.array([[1.0, -5.0], [0.0, -1.0]])
LINEAR_B = np.array([[0.0], [1.0]])


def linear_env(course: str | None = None) -> Environment:
    """Open-loop unstable 2-state linear system with one circular obstacle."""
    layout = load_course("linear", course)

    def f(X, U):
        return X @ LINEAR_A.T + U @ LINEAR_B.T

    def jac(x, u):
        return LINEAR_A.copy(), LINEAR_B.copy()

    return Environment("linear", layout["course"], 2, 1, f, jac, layout["dt"], layout["horizon"],
                       SafetyFunction.from_config(layout["constraints"], 2), layout["x0"], layout["goal"],
                       layout["u_ref"], layout["cost"], layout["recipe"], discretization="zoh", layout=layout)


# -- differential-drive (Dubins) vehicle ---------------------------------------------

WHEEL_RADIUS = 0.2
HALF_AXLE = 0.2


def dubins_f(X, U, r=WHEEL_RADIUS, d=HALF_AXLE):
    v = 0.5 * r * (U[:, 0] + U[:, 1])
    th = X[:, 2]
    return np.stack([v * np.cos(th), v * np.sin(th), r / (2.0 * d) * (U[:, 0] - U[:, 1])], axis=1)


def dubins_jac(x, u, r=WHEEL_RADIUS, d=HALF_AXLE):
    v = 0.5 * r * (u[0] + u[1])
    c, s = np.cos(x[2]), np.sin(x[2])
    fx = np.zeros((3, 3))
    fx[0, 2], fx[1, 2] = -v * s, v * c
    w = r / (2.0 * d)
    fu = np.array([[0.5 * r * c, 0.5 * r * c], [0.5 * r * s, 0.5 * r * s], [w, -w]])
    return fx, fu


def dubins_env(course: str | None = "single") -> Environment:
    layout = load_course("dubins", course)
    return Environment("dubins", layout["course"], 3, 2, dubins_f, dubins_jac, layout["dt"], layout["horizon"],
                       SafetyFunction.from_config(layout["constraints"], 3), layout["x0"], layout["goal"],
                       layout["u_ref"], layout["cost"], layout["recipe"], layout=layout)


# -- quadrotor -------------------------------------------------------------------------
# state: position p (3), Euler angles (roll, pitch, yaw) (3), inertial velocity (3),
# body angular rates (3); control: collective thrust and three body torques.

def _quad_known(X, U):
    """Kinematic rows: position rates and Euler-angle rates."""
    phi, th = X[:, 3], X[:, 4]
    p, q, r = X[:, 9], X[:, 10], X[:, 11]
    sphi, cphi, tth, cth = np.sin(phi), np.cos(phi), np.tan(th), np.cos(th)
    out = np.empty((X.shape[0], 6))
    out[:, 0:3] = X[:, 6:9]
    out[:, 3] = p + sphi * tth * q + cphi * tth * r
    out[:, 4] = cphi * q - sphi * r
    out[:, 5] = (sphi * q + cphi * r) / cth
    return out


def _quad_known_jac(x, u):
    phi, th = x[3], x[4]
    q, r = x[10], x[11]
    sphi, cphi, sth, cth = np.sin(phi), np.cos(phi), np.sin(th), np.cos(th)
    tth = sth / cth
    fx = np.zeros((6, 12))
    fx[0:3, 6:9] = np.eye(3)
    fx[3, 3] = cphi * tth * q - sphi * tth * r
    fx[3, 4] = (sphi * q + cphi * r) / cth**2
    fx[3, 9:12] = [1.0, sphi * tth, cphi * tth]
    fx[4, 3] = -sphi * q - cphi * r
    fx[4, 9:12] = [0.0, cphi, -sphi]
    fx[5, 3] = (cphi * q - sphi * r) / cth
    fx[5, 4] = (sphi * q + cphi * r) * sth / cth**2
    fx[5, 9:12] = [0.0, sphi / cth, cphi / cth]
    return fx, np.zeros((6, 4))


def _quad_dynamic(X, U, mass, inertia, g):
    """Dynamic rows: inertial linear accelerations and body angular accelerations."""
    phi, th, psi = X[:, 3], X[:, 4], X[:, 5]
    p, q, r = X[:, 9], X[:, 10], X[:, 11]
    a = U[:, 0] / mass
    sphi, cphi, sth, cth, spsi, cpsi = np.sin(phi), np.cos(phi), np.sin(th), np.cos(th), np.sin(psi), np.cos(psi)
    Ix, Iy, Iz = inertia
    out = np.empty((X.shape[0], 6))
    out[:, 0] = a * (cphi * sth * cpsi + sphi * spsi)
    out[:, 1] = a * (cphi * sth * spsi - sphi * cpsi)
    out[:, 2] = a * cphi * cth - g
    out[:, 3] = (U[:, 1] + (Iy - Iz) * q * r) / Ix
    out[:, 4] = (U[:, 2] + (Iz - Ix) * p * r) / Iy
    out[:, 5] = (U[:, 3] + (Ix - Iy) * p * q) / Iz
    return out


def _quad_dynamic_jac(x, u, mass, inertia, g):
    phi, th, psi = x[3], x[4], x[5]
    p, q, r = x[9], x[10], x[11]
    a = u[0] / mass
    sphi, cphi, sth, cth, spsi, cpsi = np.sin(phi), np.cos(phi), np.sin(th), np.cos(th), np.sin(psi), np.cos(psi)
    Ix, Iy, Iz = inertia
    fx = np.zeros((6, 12))
    fu = np.zeros((6, 4))
    fx[0, 3:6] = a * np.array([-sphi * sth * cpsi + cphi * spsi, cphi * cth * cpsi, -cphi * sth * spsi + sphi * cpsi])
    fx[1, 3:6] = a * np.array([-sphi * sth * spsi - cphi * cpsi, cphi * cth * spsi, cphi * sth * cpsi + sphi * spsi])
    fx[2, 3:5] = a * np.array([-sphi * cth, -cphi * sth])
    fu[0, 0] = (cphi * sth * cpsi + sphi * spsi) / mass
    fu[1, 0] = (cphi * sth * spsi - sphi * cpsi) / mass
    fu[2, 0] = cphi * cth / mass
    fx[3, 10:12] = np.array([r, q]) * (Iy - Iz) / Ix
    fx[4, [9, 11]] = np.array([r, p]) * (Iz - Ix) / Iy
    fx[5, 9:11] = np.array([q, p]) * (Ix - Iy) / Iz
    fu[3, 1], fu[4, 2], fu[5, 3] = 1.0 / Ix, 1.0 / Iy, 1.0 / Iz
    return fx, fu


QUAD_GP_ROWS = tuple(range(6, 12))


def quadrotor_env(course: str | None = None) -> Environment:
    """12-state Euler-angle quadrotor; the GP learns the six acceleration rows."""
    layout = load_course("quadrotor", course)
    prm = layout["params"]
    mass, inertia, g = float(prm["mass"]), tuple(float(v) for v in prm["inertia"]), float(prm["gravity"])

    def f(X, U):
        return np.hstack([_quad_known(X, U), _quad_dynamic(X, U, mass, inertia, g)])

    def jac(x, u):
        kx, ku = _quad_known_jac(x, u)
        dx, du = _quad_dynamic_jac(x, u, mass, inertia, g)
        return np.vstack([kx, dx]), np.vstack([ku, du])

    return Environment("quadrotor", layout["course"], 12, 4, f, jac, layout["dt"], layout["horizon"],
                       SafetyFunction.from_config(layout["constraints"], 12), layout["x0"], layout["goal"],
                       layout["u_ref"], layout["cost"], layout["recipe"], gp_rows=QUAD_GP_ROWS,
                       known=_quad_known, known_jac=_quad_known_jac, layout=layout)


def make_env(name: str, course: str | None = None) -> Environment:
    if name == "linear":
        return linear_env(course)
    if name == "dubins":
        return dubins_env(course or "single")
    if name == "quadrotor":
        return quadrotor_env(course)
    raise InvalidArgumentError(f"unknown environment {name!r}; valid: {', '.join(ENV_NAMES)}")


# -- training data -----------------------------------------------------------------------

def _targets(env: Environment, X, U, mode):
    if mode == CONTINUOUS:
        return env.f(X, U)
    return rk4_step(env.f, X, U, env.dt) - X


def _uniform_samples(env, recipe, rng):
    d = env.state_dim + env.control_dim
    Z = rng.uniform(recipe["low"], recipe["high"], size=(int(recipe["count"]), d))
    return Z[:, : env.state_dim], Z[:, env.state_dim:]


def _sinusoid_samples(env, recipe, rng, r=WHEEL_RADIUS, d=HALF_AXLE):
    """Points along Lissajous reference paths, with wheel speeds that realize them."""
    cx, cy = recipe["center"]
    vmin, vmax = recipe["speed"]
    npts = int(recipe["points"])
    xs, us = [], []
    for _ in range(int(recipe["trajectories"])):
        for _attempt in range(1000):
            A, B = rng.uniform(*recipe["amplitude"], size=2)
            w = rng.uniform(*recipe["omega"])
            k = rng.choice([1.0, 2.0])
            p = rng.uniform(0.0, 2.0 * np.pi)
            t = np.linspace(0.0, 2.0 * np.pi / w, npts, endpoint=False)
            dx, dy = A * w * np.cos(w * t + p), B * k * w * np.cos(k * w * t)
            ddx, ddy = -A * w * w * np.sin(w * t + p), -B * (k * w) ** 2 * np.sin(k * w * t)
            v = np.hypot(dx, dy)
            if v.min() >= vmin and v.max() <= vmax:
                break
        else:
            raise InvalidArgumentError("sinusoid recipe cannot satisfy its speed range")
        omega = (dx * ddy - dy * ddx) / v**2
        state = np.stack([cx + A * np.sin(w * t + p), cy + B * np.sin(k * w * t), np.arctan2(dy, dx)], axis=1)
        xs.append(state)
        us.append(np.stack([(v + d * omega) / r, (v - d * omega) / r], axis=1))
    return np.vstack(xs), np.vstack(us)


def _closed_loop_samples(env, recipe, rng):
    """Obstacle-free flights under a hover LQR chasing random waypoints, with sinusoidal excitation."""
    n, m = env.state_dim, env.control_dim
    hover = np.zeros(n)
    A, B = env.jac(hover, env.u_ref)
    Ad, Bd = discretize(A, B, env.dt, "zoh")
    Qw = np.diag([1, 1, 1, 1, 1, 1, 0.5, 0.5, 0.5, 0.1, 0.1, 0.1])
    K = dare_solve(Ad, Bd, Qw * env.dt, np.diag([1.0, 50.0, 50.0, 50.0]) * env.dt).K
    steps = int(round(recipe["duration"] / env.dt))
    stride = int(recipe.get("stride", 1))
    box = np.asarray(recipe["target_box"], dtype=float)
    amp = np.asarray(recipe["excitation"], dtype=float)
    T = int(recipe["trajectories"])
    X = np.zeros((T, n))
    X[:, 0:3] = rng.uniform(box[:, 0], box[:, 1], size=(T, 3))
    X[:, 3:6] = rng.uniform(-0.2, 0.2, size=(T, 3))
    X[:, 6:9] = rng.uniform(-1.0, 1.0, size=(T, 3))
    target = np.zeros((T, n))
    target[:, 0:3] = rng.uniform(box[:, 0], box[:, 1], size=(T, 3))
    freq = rng.uniform(0.5, 3.0, size=(T, m))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(T, m))
    xs, us = [], []
    for k in range(steps):
        err = X - target
        err[:, 3:6] = (err[:, 3:6] + np.pi) % (2.0 * np.pi) - np.pi
        U = env.u_ref - err @ K.T + amp * np.sin(freq * k * env.dt * 2.0 * np.pi + phase)
        U[:, 0] = np.clip(U[:, 0], 0.0, 4.0 * env.u_ref[0])
        if k % stride == 0:
            xs.append(X.copy())
            us.append(U.copy())
        X = rk4_step(env.f, X, U, env.dt)
    Xs, Us = np.vstack(xs), np.vstack(us)
    count = int(recipe.get("count", len(Xs)))
    if count < len(Xs):
        idx = np.sort(rng.choice(len(Xs), size=count, replace=False))
        Xs, Us = Xs[idx], Us[idx]
    return Xs, Us


RECIPES = {"uniform": _uniform_samples, "sinusoid": _sinusoid_samples, "closed_loop": _closed_loop_samples}


def generate_training_data(env: Environment, seed: int, mode: str = CONTINUOUS, count: int | None = None) -> Dataset:
    """Run the environment's data recipe; targets are exact derivatives (or RK4 deltas)."""
    recipe = dict(env.recipe)
    if count is not None:
        if count < 1:
            raise InvalidArgumentError("count must be >= 1")
        recipe["count"] = count
    rng = np.random.default_rng(seed)
    X, U = RECIPES[recipe["kind"]](env, recipe, rng)
    return Dataset(np.hstack([X, U]), _targets(env, X, U, mode), mode)


def gp_training_set(env: Environment, data: Dataset) -> Dataset:
    """Restrict targets to the rows the GP must learn (the acceleration rows for grey-box envs)."""
    if env.gp_rows is None:
        return data
    if data.mode != CONTINUOUS:
        raise InvalidArgumentError("grey-box environments need continuous-derivative data")
    return Dataset(data.inputs, data.targets[:, list(env.gp_rows)], data.mode)


def column_names(env: Environment):
    n, m = env.state_dim, env.control_dim
    return [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + [f"f{i + 1}" for i in range(n)]


def save_dataset_csv(data: Dataset, path, names=None) -> None:
    names = names or ([f"in{i + 1}" for i in range(data.input_dim)] + [f"out{i + 1}" for i in range(data.output_dim)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in np.hstack([data.inputs, data.targets]):
            w.writerow([repr(float(v)) for v in row])


def load_dataset_csv(path, input_dim: int, mode: str = CONTINUOUS) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise InvalidArgumentError(f"{path}: dataset has no rows")
    arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return Dataset(arr[:, :input_dim], arr[:, input_dim:], mode)

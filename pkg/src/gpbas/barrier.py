"""Safety functions, barrier states and the safety-embedded Gaussian model.

Conventions
-----------
``h_i(x) > 0`` defines the safe set. The barrier function ``B`` (inverse
barrier ``1/h`` by default) turns each constraint into a barrier value.
The embedded state is ``xbar = [x; z]`` where ``z = w - beta0`` and ``w`` is
the (discrete) barrier state; ``beta0 = B(h(shift_point))`` places the barrier
state's equilibrium at the shift point.

With ``combine="sum"`` all constraints share one barrier state
(``w = sum_i B(h_i)``); with ``combine="per-constraint"`` there is one barrier
state per constraint.

``BarrierConfig.gamma`` is the continuous-time correction gain used by the
barrier-state ODE, its Gaussian moments and the LQR linearization.
``BarrierConfig.dbas_gamma`` is the gain of the discrete recursion used in
rollouts and DDP and must lie in [0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfinv

from .dynamics import transition, transition_jacobians
from .errors import BoundaryViolationError, InvalidArgumentError, InvariantError


# -- barrier function family ------------------------------------------------

def _inverse_value(h):
    return 1.0 / h


def _inverse_inverse(w):
    return 1.0 / w


def _inverse_deriv(h):
    return -1.0 / (h * h)


# kind -> (B, B^-1, B')
BARRIERS = {"inverse": (_inverse_value, _inverse_inverse, _inverse_deriv)}


def _barrier(kind):
    try:
        return BARRIERS[kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown barrier kind {kind!r}; known: {sorted(BARRIERS)}") from None


def _require_positive(h, what="h"):
    h = np.asarray(h, dtype=float)
    if np.any(~(h > 0.0)):
        raise BoundaryViolationError(f"{what} must be > 0 (state left the safe set), got min {np.min(h)}",
                                     h=np.min(h))
    return h


def barrier_value(kind, h):
    return _barrier(kind)[0](_require_positive(h))


def barrier_inverse(kind, w):
    return _barrier(kind)[1](_require_positive(w, "barrier value"))


def barrier_deriv(kind, h):
    return _barrier(kind)[2](_require_positive(h))


# -- safety functions ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CircleConstraint:
    """``h(x) = |x[idx] - c|^2 - (r + margin)^2`` (a disc, sphere, ... to avoid)."""

    center: np.ndarray
    radius: float
    indices: tuple
    margin: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.center.size != len(self.indices):
            raise InvalidArgumentError("circle center and position indices differ in length")
        if self.radius <= 0.0:
            raise InvalidArgumentError("circle radius must be positive")

    @property
    def label(self):
        return f"circle(c={self.center.tolist()}, r={self.radius})"

    @property
    def rows(self):
        return self.indices

    def value(self, X):
        d = X[..., list(self.indices)] - self.center
        return np.sum(d * d, axis=-1) - (self.radius + self.margin) ** 2

    def grad(self, X):
        g = np.zeros(X.shape)
        g[..., list(self.indices)] = 2.0 * (X[..., list(self.indices)] - self.center)
        return g


def _halfspace(params):
    normal = np.asarray(params["normal"], dtype=float)
    offset = float(params.get("offset", 0.0))

    def value(X):
        return X @ normal - offset

    def grad(X):
        return np.broadcast_to(normal, X.shape).copy()

    return value, grad


# Named constraint builders for ``{"type": "expression"}`` entries.
EXPRESSIONS = {"halfspace": _halfspace}


@dataclass(frozen=True, eq=False)
class ExpressionConstraint:
    """A constraint given by a (vectorized) function and its gradient."""

    func: Callable
    grad_func: Callable
    label: str = "expression"
    rows: tuple | None = None  # state rows the constraint reads; None means all

    def value(self, X):
        return self.func(X)

    def grad(self, X):
        return self.grad_func(X)


class SafetyFunction:
    """Stacks ``c`` constraints over an ``n``-dimensional state.

    ``eval`` maps (..., n) -> (..., c) and ``grad`` maps (..., n) -> (..., c, n).
    """

    def __init__(self, constraints: Sequence, state_dim: int):
        self.constraints = list(constraints)
        self.n = int(state_dim)

    @property
    def count(self) -> int:
        return len(self.constraints)

    @property
    def description(self):
        return [c.label for c in self.constraints]

    def eval(self, x):
        X = np.asarray(x, dtype=float)
        if not self.constraints:
            return np.zeros(X.shape[:-1] + (0,))
        return np.stack([c.value(X) for c in self.constraints], axis=-1)

    def grad(self, x):
        X = np.asarray(x, dtype=float)
        if not self.constraints:
            return np.zeros(X.shape[:-1] + (0, self.n))
        return np.stack([c.grad(X) for c in self.constraints], axis=-2)

    def min_h(self, x):
        h = self.eval(x)
        return np.min(h, axis=-1) if h.shape[-1] else np.full(h.shape[:-1], np.inf)

    @property
    def rows(self):
        """Sorted state indices any constraint depends on."""
        out = set()
        for c in self.constraints:
            out |= set(range(self.n) if c.rows is None else c.rows)
        return sorted(out)

    def is_safe(self, x) -> bool:
        return bool(np.all(self.eval(x) > 0.0))

    @classmethod
    def from_config(cls, entries, state_dim: int) -> "SafetyFunction":
        """Build from JSON entries ``{"type": "circle", ...}`` / ``{"type": "expression", ...}``."""
        cons = []
        for e in entries:
            kind = e.get("type")
            if kind == "circle":
                idx = e.get("indices", list(range(len(e["center"]))))
                cons.append(CircleConstraint(e["center"], float(e["radius"]), idx, float(e.get("margin", 0.0))))
            elif kind == "expression":
                name = e.get("name")
                if name not in EXPRESSIONS:
                    raise InvalidArgumentError(f"unknown expression constraint {name!r}; known: {sorted(EXPRESSIONS)}")
                f, g = EXPRESSIONS[name](e.get("params", {}))
                rows = tuple(e["rows"]) if "rows" in e else None
                cons.append(ExpressionConstraint(f, g, e.get("label", name), rows))
            else:
                raise InvalidArgumentError(f"unknown constraint type {kind!r}")
        return cls(cons, state_dim)


# -- configuration and embedded model -----------------------------------------

SUM = "sum"
PER_CONSTRAINT = "per-constraint"


@dataclass(frozen=True, eq=False)
class BarrierConfig:
    kind: str = "inverse"
    gamma: float = 1.0
    dbas_gamma: float = 0.0
    shift_point: np.ndarray | None = None
    combine: str = SUM
    phi: float = 0.0

    def __post_init__(self):
        _barrier(self.kind)
        if self.gamma < 0.0:
            raise InvalidArgumentError("gamma must be >= 0")
        if not 0.0 <= self.dbas_gamma < 1.0:
            raise InvalidArgumentError("dbas_gamma must lie in [0, 1)")
        if self.combine not in (SUM, PER_CONSTRAINT):
            raise InvalidArgumentError(f"combine must be {SUM!r} or {PER_CONSTRAINT!r}")
        if self.phi < 0.0:
            raise InvalidArgumentError("phi must be >= 0")
        if self.shift_point is not None:
            object.__setattr__(self, "shift_point", np.asarray(self.shift_point, dtype=float))

    def replace(self, **changes) -> "BarrierConfig":
        fields = dict(kind=self.kind, gamma=self.gamma, dbas_gamma=self.dbas_gamma,
                      shift_point=self.shift_point, combine=self.combine, phi=self.phi)
        fields.update(changes)
        return BarrierConfig(**fields)


def bas_count(safety: SafetyFunction, config: BarrierConfig) -> int:
    if safety is None or safety.count == 0:
        return 0
    return safety.count if config.combine == PER_CONSTRAINT else 1


def barrier_of_state(x, safety: SafetyFunction, config: BarrierConfig):
    """Barrier value(s) ``B(h(x))`` combined per ``config.combine``; shape (..., q)."""
    B = _barrier(config.kind)[0]
    b = B(_require_positive(safety.eval(x)))
    return b if config.combine == PER_CONSTRAINT else b.sum(axis=-1, keepdims=True)


def barrier_gradient(x, safety: SafetyFunction, config: BarrierConfig):
    """Gradient of :func:`barrier_of_state` w.r.t. x; shape (..., q, n)."""
    dB = _barrier(config.kind)[2]
    g = dB(_require_positive(safety.eval(x)))[..., None] * safety.grad(x)
    return g if config.combine == PER_CONSTRAINT else g.sum(axis=-2, keepdims=True)


def barrier_offset(safety: SafetyFunction, config: BarrierConfig) -> np.ndarray:
    """``beta0``: barrier value at the shift point, or zeros when no shift is configured."""
    q = bas_count(safety, config)
    if config.shift_point is None or q == 0:
        return np.zeros(q)
    if not safety.is_safe(config.shift_point):
        raise BoundaryViolationError("shift point is not strictly safe", h=float(safety.min_h(config.shift_point)))
    return barrier_of_state(config.shift_point, safety, config)


@dataclass(frozen=True)
class EmbeddedState:
    x: np.ndarray
    z: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.z])

    @classmethod
    def from_vector(cls, v, n: int) -> "EmbeddedState":
        v = np.asarray(v, dtype=float)
        return cls(v[:n].copy(), v[n:].copy())


@dataclass(frozen=True, eq=False)
class EmbeddedModel:
    """Gaussian dynamics + safety function + barrier configuration.

    ``dynamics`` is one of the adapters in :mod:`gpbas.dynamics`.
    """

    dynamics: object
    safety: SafetyFunction
    config: BarrierConfig
    dt: float
    beta0: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.dt <= 0.0:
            raise InvalidArgumentError("dt must be positive")
        if self.safety is not None and self.safety.n != self.dynamics.n:
            raise InvalidArgumentError("safety function and dynamics disagree on the state dim")
        object.__setattr__(self, "beta0", barrier_offset(self.safety, self.config))

    @property
    def n(self) -> int:
        return self.dynamics.n

    @property
    def m(self) -> int:
        return self.dynamics.m

    @property
    def q(self) -> int:
        return bas_count(self.safety, self.config)

    def with_config(self, **changes) -> "EmbeddedModel":
        return EmbeddedModel(self.dynamics, self.safety, self.config.replace(**changes), self.dt)

    def with_dynamics(self, dynamics) -> "EmbeddedModel":
        return EmbeddedModel(dynamics, self.safety, self.config, self.dt)

    def consistent_z(self, x) -> np.ndarray:
        """Barrier state that matches x exactly: ``B(h(x)) - beta0``."""
        if self.q == 0:
            return np.zeros(np.shape(x)[:-1] + (0,))
        return barrier_of_state(x, self.safety, self.config) - self.beta0

    def initial_state(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        return np.concatenate([x0, self.consistent_z(x0)])


# -- continuous barrier-state dynamics ---------------------------------------

def bas_coefficient(x, z, safety: SafetyFunction, config: BarrierConfig, beta0=None):
    """The row(s) ``B'(B^-1(z + beta0)) h_x(x)`` multiplying f in the barrier-state ODE; q x n.

    With several constraints summed into one barrier state, the composite
    derivative ``sum_i B'(h_i(x)) h_i,x(x)`` is used instead.
    """
    _, Binv, dB = _barrier(config.kind)
    beta0 = barrier_offset(safety, config) if beta0 is None else beta0
    x = np.asarray(x, dtype=float)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    hx = safety.grad(x)
    if config.combine == PER_CONSTRAINT or safety.count == 1:
        w = _require_positive(z + beta0, "barrier value z + beta0")
        return dB(Binv(w))[:, None] * hx
    h = _require_positive(safety.eval(x))
    return (dB(h)[:, None] * hx).sum(axis=0, keepdims=True)


def bas_rhs(x, z, xdot, safety: SafetyFunction, config: BarrierConfig, beta0=None):
    """Barrier-state time derivative ``Bcal(x,z) xdot - gamma (z + beta0 - B(h(x)))``; shape (q,)."""
    beta0 = barrier_offset(safety, config) if beta0 is None else beta0
    z = np.atleast_1d(np.asarray(z, dtype=float))
    coef = bas_coefficient(x, z, safety, config, beta0)
    return coef @ np.asarray(xdot, dtype=float) - config.gamma * (z + beta0 - barrier_of_state(x, safety, config))


def gp_bas_moments(x, z, u, model: EmbeddedModel):
    """Gaussian moments of the barrier-state derivative under the GP posterior.

    Returns ``(mu_z, sigma2_z)`` with ``mu_z = Bcal E[f] - gamma (z + beta0 - B(h))``
    and ``sigma2_z = Bcal V[f] Bcal^T`` (V diagonal). In discrete-delta mode the
    delta divided by dt stands in for f.
    """
    x = np.asarray(x, dtype=float)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if not model.safety.is_safe(x):
        raise BoundaryViolationError("state is not strictly safe", h=float(model.safety.min_h(x)))
    mean, var = model.dynamics.predict(x, u)
    if model.dynamics.mode != "continuous-derivative":
        mean, var = mean / model.dt, var / model.dt**2
    coef = bas_coefficient(x, z, model.safety, model.config, model.beta0)
    mu = coef @ mean - model.config.gamma * (z + model.beta0 - barrier_of_state(x, model.safety, model.config))
    sigma2 = (coef * var) @ coef.T
    return mu, 0.5 * (sigma2 + sigma2.T)


def quantile_phi(rho: float) -> float:
    """One-sided Gaussian quantile ``sqrt(2) erfinv(2 rho - 1)``."""
    if not 0.0 < rho < 1.0:
        raise InvalidArgumentError(f"rho must lie in (0, 1), got {rho}")
    return math.sqrt(2.0) * float(erfinv(2.0 * rho - 1.0))


def bas_upper_bound(mu_z, sigma2_z, phi: float):
    """``mu_z + phi * sqrt(diag(sigma2_z))``."""
    mu_z = np.atleast_1d(np.asarray(mu_z, dtype=float))
    diag = np.diag(np.atleast_2d(np.asarray(sigma2_z, dtype=float)))
    if np.any(diag < 0.0):
        raise InvariantError(f"barrier-state variance has negative diagonal {diag}")
    if phi == 0.0:
        return mu_z.copy()
    return mu_z + phi * np.sqrt(diag)


# -- discrete barrier states ---------------------------------------------------

def dbas_step(x_k, w_k, x_next, safety: SafetyFunction, config: BarrierConfig):
    """``w_{k+1} = B(h(x_next)) - dbas_gamma * (w_k - B(h(x_k)))``."""
    w_k = np.atleast_1d(np.asarray(w_k, dtype=float))
    b_next = barrier_of_state(np.asarray(x_next, dtype=float), safety, config)
    if config.dbas_gamma == 0.0:
        return b_next
    return b_next - config.dbas_gamma * (w_k - barrier_of_state(np.asarray(x_k, dtype=float), safety, config))


def dbas_gradients(x_k, w_k, u_k, fx, fu, x_next, safety: SafetyFunction, config: BarrierConfig):
    """Jacobians of :func:`dbas_step` composed with the transition ``x_next = F(x_k, u_k)``.

    ``fx`` and ``fu`` are the Jacobians of that one-step map. Returns
    ``(dw/dx, dw/dw, dw/du)`` of shapes q x n, q x q, q x m.
    """
    g_next = barrier_gradient(np.asarray(x_next, dtype=float), safety, config)
    q = g_next.shape[0]
    dwdx = g_next @ fx
    if config.dbas_gamma != 0.0:
        dwdx = dwdx + config.dbas_gamma * barrier_gradient(np.asarray(x_k, dtype=float), safety, config)
    return dwdx, -config.dbas_gamma * np.eye(q), g_next @ fu


# -- one step of the embedded model ----------------------------------------------

def _embedded_step_vec(xbar, u, model: EmbeddedModel, use_bound: bool):
    n, q = model.n, model.q
    x, z = xbar[:n], xbar[n:]
    if q and not model.safety.is_safe(x):
        raise BoundaryViolationError("state is not strictly safe", h=float(model.safety.min_h(x)))
    bound = use_bound and model.config.phi > 0.0 and q > 0
    if not bound:
        x_next, _ = transition(model.dynamics, x[None], np.asarray(u, float)[None], model.dt, return_var=False)
        x_next = x_next[0]
    else:
        # only rows the constraints read need a predictive variance
        x_next, var = transition(model.dynamics, x[None], np.asarray(u, float)[None], model.dt,
                                 var_rows=model.safety.rows)
        x_next, var = x_next[0], var[0]
    if q == 0:
        return x_next
    if not model.safety.is_safe(x_next):
        raise BoundaryViolationError("next state is not strictly safe", h=float(model.safety.min_h(x_next)))
    w_next = dbas_step(x, z + model.beta0, x_next, model.safety, model.config)
    if bound:
        coef = barrier_gradient(x_next, model.safety, model.config)
        w_next = w_next + model.config.phi * np.sqrt((coef**2) @ var)
    return np.concatenate([x_next, w_next - model.beta0])


def embedded_step(state, u, model: EmbeddedModel, use_bound: bool = False):
    """Advance ``[x; z]`` one step through the GP-mean dynamics and the discrete barrier state.

    ``state`` is an :class:`EmbeddedState` or a flat ``[x; z]`` vector; the
    same type is returned. With ``use_bound`` (and ``config.phi > 0``) the
    barrier state is pushed to its upper quantile
    ``E[w] + phi * |dB(h)/dx| sigma[x_next]``.
    """
    if isinstance(state, EmbeddedState):
        out = _embedded_step_vec(state.vector, u, model, use_bound)
        return EmbeddedState.from_vector(out, model.n)
    return _embedded_step_vec(np.asarray(state, dtype=float), u, model, use_bound)


def embedded_step_jacobians(xbar, u, model: EmbeddedModel, x_next=None):
    """Jacobians of the mean embedded step (no quantile term): (n+q) x (n+q) and (n+q) x m."""
    n, q = model.n, model.q
    x, z = xbar[:n], xbar[n:]
    A, B = transition_jacobians(model.dynamics, x, u, model.dt)
    if q == 0:
        return A, B
    if x_next is None:
        x_next = transition(model.dynamics, x[None], np.asarray(u)[None], model.dt, return_var=False)[0][0]
    dwdx, dwdw, dwdu = dbas_gradients(x, z + model.beta0, u, A, B, x_next, model.safety, model.config)
    Abar = np.zeros((n + q, n + q))
    Abar[:n, :n] = A
    Abar[n:, :n] = dwdx
    Abar[n:, n:] = dwdw
    return Abar, np.vstack([B, dwdu])


def embedded_jacobians_lqr(model: EmbeddedModel, u_eq=None):
    """Continuous-time Jacobians of ``[f; f^z]`` at ``(x = shift_point, z = 0, u = u_eq)``.

    The bottom-left block is ``Bcal0 f_x + gamma B'(h0) h_x(x0)`` and the
    bottom-right block ``-gamma I``.
    """
    if model.config.shift_point is None:
        raise InvalidArgumentError("LQR linearization needs a shift point")
    x0 = model.config.shift_point
    u0 = np.zeros(model.m) if u_eq is None else np.asarray(u_eq, dtype=float)
    fx, fu = model.dynamics.jacobians(x0, u0)
    if model.dynamics.mode != "continuous-derivative":
        fx, fu = fx / model.dt, fu / model.dt
    n, q, gamma = model.n, model.q, model.config.gamma
    if q == 0:
        return fx, fu
    coef = bas_coefficient(x0, np.zeros(q), model.safety, model.config, model.beta0)
    grad0 = barrier_gradient(x0, model.safety, model.config)
    A = np.zeros((n + q, n + q))
    A[:n, :n] = fx
    A[n:, :n] = coef @ fx + gamma * grad0
    A[n:, n:] = -gamma * np.eye(q)
    return A, np.vstack([fu, coef @ fu])

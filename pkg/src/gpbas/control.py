"""LQR stabilization and DDP trajectory optimization on the safety-embedded model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .barrier import (
    BoundaryViolationError,
    EmbeddedModel,
    embedded_jacobians_lqr,
    embedded_step,
)
from .barrier import dbas_gradients
from .dynamics import transition_jacobians_batch
from .errors import InvalidArgumentError, NotStabilizableError, SolverStalledError

logger = logging.getLogger(__name__)


def _is_psd(M, tol=1e-10):
    return np.allclose(M, M.T, atol=1e-10) and np.min(np.linalg.eigvalsh(M)) >= -tol


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """``0.5 (xbar - goal)' Q (xbar - goal) + 0.5 (u - u_ref)' R (u - u_ref)`` per knot, ``Qf`` at the end."""

    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    goal: np.ndarray
    u_ref: np.ndarray | None = None

    def __post_init__(self):
        for name in ("Q", "R", "Qf"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float))
        m = self.R.shape[0]
        u_ref = np.zeros(m) if self.u_ref is None else np.asarray(self.u_ref, dtype=float)
        object.__setattr__(self, "u_ref", u_ref)
        if not (_is_psd(self.Q) and _is_psd(self.Qf)):
            raise InvalidArgumentError("Q and Qf must be symmetric positive semidefinite")
        if not np.allclose(self.R, self.R.T):
            raise InvalidArgumentError("R must be symmetric")
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise InvalidArgumentError("R must be positive definite") from None
        if self.Q.shape != self.Qf.shape or self.Q.shape[0] != self.goal.size:
            raise InvalidArgumentError("Q, Qf and goal dimensions disagree")

    def stage(self, xbar, u) -> float:
        dx, du = xbar - self.goal, u - self.u_ref
        return 0.5 * float(dx @ self.Q @ dx + du @ self.R @ du)

    def terminal(self, xbar) -> float:
        dx = xbar - self.goal
        return 0.5 * float(dx @ self.Qf @ dx)

    def stage_costs(self, states, controls) -> np.ndarray:
        """Per-knot costs, length N+1 (the last entry is the terminal cost)."""
        dX = states[:-1] - self.goal
        dU = controls - self.u_ref
        run = 0.5 * (np.einsum("ij,jk,ik->i", dX, self.Q, dX) + np.einsum("ij,jk,ik->i", dU, self.R, dU))
        return np.append(run, self.terminal(states[-1]))

    def total(self, states, controls) -> float:
        return float(np.sum(self.stage_costs(states, controls)))


# -- LQR ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LqrGains:
    K: np.ndarray
    P: np.ndarray
    iterations: int = 0


def riccati_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.linalg.norm(P - rhs))


def dare_solve(A, B, Q, R, tol: float = 1e-10, max_iter: int = 10_000) -> LqrGains:
    """Solve the discrete algebraic Riccati equation by fixed-point (value) iteration.

    Raises :class:`NotStabilizableError` if ``trace(P)`` exceeds 1e12 or the
    iteration does not settle within ``max_iter`` sweeps.
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
    if B.shape[0] != A.shape[0] or Q.shape != A.shape or R.shape != (B.shape[1], B.shape[1]):
        raise InvalidArgumentError("inconsistent DARE dimensions")
    P = Q.copy()
    for it in range(1, max_iter + 1):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.trace(P_next) > 1e12:
            raise NotStabilizableError(f"Riccati iteration diverged after {it} sweeps (trace(P) > 1e12)")
        delta = np.linalg.norm(P_next - P)
        P = P_next
        if delta < tol:
            break
    else:
        raise NotStabilizableError(f"Riccati iteration did not converge in {max_iter} sweeps")
    BtP = B.T @ P
    K = np.linalg.solve(R + BtP @ B, BtP @ A)
    if np.max(np.abs(np.linalg.eigvals(A - B @ K))) >= 1.0:
        raise NotStabilizableError("closed loop A - BK is not Schur stable")
    return LqrGains(K, P, it)


def discretize(A, B, dt: float, method: str = "zoh"):
    """Zero-order-hold (matrix exponential) or forward-Euler discretization."""
    n, m = B.shape
    if method == "euler":
        return np.eye(n) + dt * A, dt * B
    if method != "zoh":
        raise InvalidArgumentError(f"unknown discretization {method!r}")
    M = np.zeros((n + m, n + m))
    M[:n, :n], M[:n, n:] = A, B
    E = expm(M * dt)
    return E[:n, :n], E[:n, n:]


def gpbas_lqr(model: EmbeddedModel, cost: QuadraticCost, discretization: str = "zoh", u_eq=None) -> LqrGains:
    """LQR gains for the linearized safety-embedded model at the shift point.

    ``cost.Q`` / ``cost.R`` are continuous-time rates and are scaled by dt.
    """
    A, B = embedded_jacobians_lqr(model, u_eq)
    Ad, Bd = discretize(A, B, model.dt, discretization)
    return dare_solve(Ad, Bd, cost.Q * model.dt, cost.R * model.dt)


class LqrPolicy:
    """``u = u_ref - K (xbar - goal)``; works on single states and on row batches."""

    def __init__(self, gains: LqrGains, goal, u_ref=None):
        self.K = gains.K
        self.goal = np.asarray(goal, dtype=float)
        self.u_ref = np.zeros(self.K.shape[0]) if u_ref is None else np.asarray(u_ref, dtype=float)

    def __call__(self, k, xbar):
        return self.u_ref - (np.asarray(xbar) - self.goal) @ self.K.T


class AffinePolicy:
    """Time-varying ``u_k = u_nom_k + K_k (xbar - xbar_nom_k)`` from a DDP solution.

    Past the last knot the final gain and control are held.
    """

    def __init__(self, states, controls, gains):
        self.states = np.asarray(states)
        self.controls = np.asarray(controls)
        self.gains = np.asarray(gains)

    def __call__(self, k, xbar):
        k = min(k, len(self.controls) - 1)
        return self.controls[k] + (np.asarray(xbar) - self.states[k]) @ self.gains[k].T


# -- DDP ------------------------------------------------------------------------------

@dataclass
class DdpOptions:
    max_iters: int = 100
    epsilon: float = 1e-4
    reg_init: float = 0.0
    reg_min: float = 1e-6
    reg_max: float = 1e6
    alpha_min: float = 2.0 ** -10
    use_bound: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")
        if self.epsilon <= 0.0 or self.alpha_min <= 0.0 or self.alpha_min > 1.0:
            raise InvalidArgumentError("epsilon must be > 0 and alpha_min in (0, 1]")


@dataclass
class DdpSolution:
    states: np.ndarray  # (N+1) x (n+q)
    controls: np.ndarray  # N x m
    gains: np.ndarray  # N x m x (n+q)
    feedforward: np.ndarray  # N x m
    cost_history: list = field(default_factory=list)
    converged: bool = False
    delta_v: float = np.inf
    iterations: int = 0

    @property
    def cost(self) -> float:
        return self.cost_history[-1]

    def policy(self) -> AffinePolicy:
        return AffinePolicy(self.states, self.controls, self.gains)


def _forward(model, cost, x0, nominal_states, nominal_controls, ff, K, alpha, use_bound):
    """Closed-loop rollout of a candidate step; ``None`` when it leaves the safe set."""
    N = len(nominal_controls)
    states = np.empty_like(nominal_states)
    controls = np.empty_like(nominal_controls)
    states[0] = x0
    try:
        for k in range(N):
            u = nominal_controls[k] + alpha * ff[k] + K[k] @ (states[k] - nominal_states[k])
            controls[k] = u
            states[k + 1] = embedded_step(states[k], u, model, use_bound)
    except BoundaryViolationError:
        return None
    if not np.all(np.isfinite(states)):
        return None
    return states, controls


def _linearize(model: EmbeddedModel, states, controls):
    n, q = model.n, model.q
    X, U = states[:-1, :n], controls
    A, B = transition_jacobians_batch(model.dynamics, X, U, model.dt)
    if q == 0:
        return A, B
    N = len(U)
    Abar = np.zeros((N, n + q, n + q))
    Bbar = np.zeros((N, n + q, model.m))
    for k in range(N):
        dwdx, dwdw, dwdu = dbas_gradients(X[k], states[k, n:] + model.beta0, U[k], A[k], B[k],
                                          states[k + 1, :n], model.safety, model.config)
        Abar[k, :n, :n] = A[k]
        Abar[k, n:, :n] = dwdx
        Abar[k, n:, n:] = dwdw
        Bbar[k, :n] = B[k]
        Bbar[k, n:] = dwdu
    return Abar, Bbar


def _backward(cost: QuadraticCost, states, controls, A, B, lam):
    """iLQR backward pass; returns ``(ff, K, dV1, dV2, Qu_norm)`` or ``None`` if Q_uu is not PD."""
    N, m = controls.shape
    nx = states.shape[1]
    ff = np.zeros((N, m))
    K = np.zeros((N, m, nx))
    Vx = cost.Qf @ (states[-1] - cost.goal)
    Vxx = cost.Qf.copy()
    dV1 = dV2 = 0.0
    qu_max = 0.0
    for k in range(N - 1, -1, -1):
        lx = cost.Q @ (states[k] - cost.goal)
        lu = cost.R @ (controls[k] - cost.u_ref)
        Ak, Bk = A[k], B[k]
        Qx = lx + Ak.T @ Vx
        Qu = lu + Bk.T @ Vx
        VxxA = Vxx @ Ak
        Qxx = cost.Q + Ak.T @ VxxA
        Qux = Bk.T @ VxxA
        Quu = cost.R + Bk.T @ Vxx @ Bk
        Quu = 0.5 * (Quu + Quu.T) + lam * np.eye(m)
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            return None
        kk = -np.linalg.solve(L.T, np.linalg.solve(L, Qu))
        KK = -np.linalg.solve(L.T, np.linalg.solve(L, Qux))
        ff[k], K[k] = kk, KK
        dV1 += float(kk @ Qu)
        dV2 += 0.5 * float(kk @ Quu @ kk)
        qu_max = max(qu_max, float(np.linalg.norm(Qu)))
        Vx = Qx + KK.T @ Quu @ kk + KK.T @ Qu + Qux.T @ kk
        Vxx = Qxx + KK.T @ Quu @ KK + KK.T @ Qux + Qux.T @ KK
        Vxx = 0.5 * (Vxx + Vxx.T)
    return ff, K, dV1, dV2, qu_max


def rollout_open_loop(model: EmbeddedModel, x0, controls, use_bound: bool = True):
    """States of the embedded model driven by a fixed control sequence."""
    states = np.empty((len(controls) + 1, len(x0)))
    states[0] = x0
    for k, u in enumerate(controls):
        try:
            states[k + 1] = embedded_step(states[k], u, model, use_bound)
        except BoundaryViolationError as err:
            err.index = k + 1 if err.index is None else err.index
            raise
    return states


def ddp_optimize(model: EmbeddedModel, cost: QuadraticCost, x0, u_init, opts: DdpOptions | None = None) -> DdpSolution:
    """Iterative LQR / first-order DDP on the safety-embedded model.

    ``x0`` is either the plain state (its barrier state is initialized
    consistently) or the full embedded state. Candidate rollouts that leave
    the safe set are treated as infinitely costly by the line search.
    """
    opts = opts or DdpOptions()
    U = np.array(u_init, dtype=float)
    if U.ndim != 2 or U.shape[0] < 2 or U.shape[1] != model.m:
        raise InvalidArgumentError(f"u_init must be N x {model.m} with N >= 2, got shape {U.shape}")
    x0 = np.asarray(x0, dtype=float)
    if x0.size == model.n:
        x0 = model.initial_state(x0)
    if x0.size != model.n + model.q:
        raise InvalidArgumentError("x0 must have dim n or n + q")
    use_bound = opts.use_bound and model.config.phi > 0.0
    X = rollout_open_loop(model, x0, U, use_bound)
    J = cost.total(X, U)
    history = [J]
    lam = opts.reg_init
    alphas = []
    a = 1.0
    while a >= opts.alpha_min * (1 - 1e-12):
        alphas.append(a)
        a *= 0.5

    ff = np.zeros_like(U)
    K = np.zeros((len(U), model.m, x0.size))
    converged, delta_v, it = False, np.inf, 0
    A, B = _linearize(model, X, U)
    for it in range(1, opts.max_iters + 1):
        bw = _backward(cost, X, U, A, B, lam)
        while bw is None:
            lam = max(10.0 * lam, opts.reg_min)
            if lam > opts.reg_max:
                raise SolverStalledError("Q_uu not positive definite at maximum regularization",
                                         DdpSolution(X, U, K, ff, history, False, delta_v, it))
            bw = _backward(cost, X, U, A, B, lam)
        ff, K, dV1, dV2, _ = bw
        delta_v = -(dV1 + dV2)
        if delta_v < opts.epsilon:
            converged = True
            break
        accepted = None
        for alpha in alphas:
            cand = _forward(model, cost, x0, X, U, ff, K, alpha, use_bound)
            if cand is None:
                continue
            Jc = cost.total(*cand)
            if Jc < J:
                accepted = cand + (Jc, alpha)
                break
        if accepted is None:
            lam = max(10.0 * lam, opts.reg_min)
            logger.debug("iter %d: line search failed, lambda -> %.1e", it, lam)
            if lam > opts.reg_max:
                raise SolverStalledError("no improving step at maximum regularization",
                                         DdpSolution(X, U, K, ff, history, False, delta_v, it))
            continue
        X, U, J, alpha = accepted
        history.append(J)
        lam = 0.0 if lam <= opts.reg_min else 0.5 * lam
        logger.debug("iter %d: cost %.6g alpha %.4g dV %.3e", it, J, alpha, delta_v)
        A, B = _linearize(model, X, U)
    if not converged:
        bw = _backward(cost, X, U, A, B, max(lam, opts.reg_min))
        if bw is not None:
            ff, K, dV1, dV2, _ = bw
            delta_v = -(dV1 + dV2)
    return DdpSolution(X, U, K, ff, history, converged, delta_v, it)


# -- policy rollouts -------------------------------------------------------------

@dataclass
class Rollout:
    states: np.ndarray  # embedded states actually visited
    controls: np.ndarray
    h_min: np.ndarray  # min_i h_i(x_k) per visited knot
    violation_step: int | None = None

    @property
    def safe(self) -> bool:
        return self.violation_step is None

    @property
    def min_h(self) -> float:
        return float(np.min(self.h_min)) if self.h_min.size else np.inf


def rollout_policy(model: EmbeddedModel, policy, x0, horizon: int, true_step=None, use_bound=None) -> Rollout:
    """Run ``u_k = policy(k, xbar_k)`` for ``horizon`` steps.

    Without ``true_step`` the state advances on the model. With
    ``true_step(x, u) -> x_next`` the plant state follows the given dynamics
    while the barrier state is still propagated by the model from the
    measured state. The rollout stops at the first knot with ``min h <= 0``.
    """
    if horizon < 0:
        raise InvalidArgumentError("horizon must be >= 0")
    n = model.n
    use_bound = model.config.phi > 0.0 if use_bound is None else use_bound
    x0 = np.asarray(x0, dtype=float)
    xbar = model.initial_state(x0) if x0.size == n else x0.copy()
    states, controls, hmins = [xbar], [], [float(model.safety.min_h(xbar[:n])) if model.q else np.inf]
    violation = None if hmins[0] > 0.0 else 0
    for k in range(horizon):
        if violation is not None:
            break
        u = np.asarray(policy(k, xbar), dtype=float)
        try:
            pred = embedded_step(xbar, u, model, use_bound)
        except BoundaryViolationError:
            pred = None
        if true_step is None:
            if pred is None:
                violation = k + 1
                controls.append(u)
                break
            xbar = pred
        else:
            x_next = np.asarray(true_step(xbar[:n], u), dtype=float)
            if pred is None:
                z_next = np.full(model.q, np.inf)
            else:
                z_next = pred[n:]
            xbar = np.concatenate([x_next, z_next])
        controls.append(u)
        states.append(xbar)
        h = float(model.safety.min_h(xbar[:n])) if model.q else np.inf
        hmins.append(h)
        if h <= 0.0 or not np.all(np.isfinite(xbar)):
            violation = k + 1
    m = model.m
    return Rollout(np.array(states), np.array(controls).reshape(-1, m), np.array(hmins), violation)

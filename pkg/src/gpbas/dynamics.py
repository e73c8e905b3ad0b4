"""Dynamics adapters with a common ``predict`` / ``jacobians`` surface.

Three flavours feed the safety-embedded model:

* :class:`GpDynamics` -- every state row is a GP output.
* :class:`GreyBoxDynamics` -- known kinematic rows stitched with GP rows.
* :class:`ExactDynamics` -- a known model with zero predictive variance
  (used for the true-model baselines and as a test oracle).

All of them return the *continuous* derivative estimate in continuous mode and
the next-state delta in discrete mode; :func:`transition` turns either into a
one-step map.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .gp import CONTINUOUS, DISCRETE, GpModel, mean_gradient, predict


class GpDynamics:
    """All ``n`` state rows come from the GP (one output per state)."""

    def __init__(self, gp: GpModel, state_dim: int):
        if gp.output_dim != state_dim:
            raise InvalidArgumentError(f"GP has {gp.output_dim} outputs, state has dim {state_dim}")
        if gp.input_dim <= state_dim:
            raise InvalidArgumentError("GP input dim must be n + m with m >= 1")
        self.gp = gp
        self.n = state_dim
        self.m = gp.input_dim - state_dim
        self.mode = gp.mode

    def predict_batch(self, X, U, var_rows: Sequence[int] | None = None, return_var=True):
        Q = np.hstack([np.atleast_2d(X), np.atleast_2d(U)])
        if not return_var:
            return predict(self.gp, Q, return_var=False), None
        if var_rows is None:
            return predict(self.gp, Q)
        mean = predict(self.gp, Q, return_var=False)
        var = np.zeros_like(mean)
        if len(var_rows):
            _, v = predict(self.gp, Q, dims=list(var_rows))
            var[:, list(var_rows)] = v[:, list(var_rows)]
        return mean, var

    def predict(self, x, u, var_rows=None, return_var=True):
        mean, var = self.predict_batch(np.asarray(x)[None], np.asarray(u)[None], var_rows, return_var)
        return mean[0], (None if var is None else var[0])

    def jacobians_batch(self, X, U):
        J = mean_gradient(self.gp, np.hstack([np.atleast_2d(X), np.atleast_2d(U)]))
        return J[:, :, : self.n], J[:, :, self.n:]

    def jacobians(self, x, u):
        fx, fu = self.jacobians_batch(np.asarray(x)[None], np.asarray(u)[None])
        return fx[0], fu[0]


class GreyBoxDynamics:
    """Known rows from closed-form kinematics, remaining rows from a GP.

    ``known(X, U)`` returns the known rows (M x len(known_rows)) and
    ``known_jac(x, u)`` their Jacobians ``(len(known_rows) x n, len(known_rows) x m)``.
    The GP has input dim ``n + m`` and one output per entry of ``gp_rows``.
    """

    def __init__(self, gp: GpModel, state_dim: int, gp_rows: Sequence[int],
                 known: Callable, known_jac: Callable):
        self.gp = gp
        self.n = state_dim
        self.m = gp.input_dim - state_dim
        self.gp_rows = list(gp_rows)
        self.known_rows = [i for i in range(state_dim) if i not in self.gp_rows]
        if gp.output_dim != len(self.gp_rows):
            raise InvalidArgumentError(f"GP has {gp.output_dim} outputs for {len(self.gp_rows)} rows")
        if gp.mode != CONTINUOUS:
            raise InvalidArgumentError("grey-box composition needs a continuous-derivative GP")
        self.known = known
        self.known_jac = known_jac
        self.mode = CONTINUOUS

    def predict_batch(self, X, U, var_rows=None, return_var=True):
        X, U = np.atleast_2d(X), np.atleast_2d(U)
        mean = np.empty((X.shape[0], self.n))
        mean[:, self.known_rows] = self.known(X, U)
        Q = np.hstack([X, U])
        gp_mean = predict(self.gp, Q, return_var=False)
        mean[:, self.gp_rows] = gp_mean
        if not return_var:
            return mean, None
        var = np.zeros_like(mean)
        wanted = self.gp_rows if var_rows is None else [r for r in var_rows if r in self.gp_rows]
        if wanted:
            dims = [self.gp_rows.index(r) for r in wanted]
            _, v = predict(self.gp, Q, dims=dims)
            var[:, wanted] = v[:, dims]
        return mean, var

    def predict(self, x, u, var_rows=None, return_var=True):
        mean, var = self.predict_batch(np.asarray(x)[None], np.asarray(u)[None], var_rows, return_var)
        return mean[0], (None if var is None else var[0])

    def jacobians(self, x, u):
        fx = np.empty((self.n, self.n))
        fu = np.empty((self.n, self.m))
        kx, ku = self.known_jac(np.asarray(x, float), np.asarray(u, float))
        fx[self.known_rows], fu[self.known_rows] = kx, ku
        J = mean_gradient(self.gp, np.concatenate([x, u])[None])[0]
        fx[self.gp_rows], fu[self.gp_rows] = J[:, : self.n], J[:, self.n:]
        return fx, fu

    def jacobians_batch(self, X, U):
        X, U = np.atleast_2d(X), np.atleast_2d(U)
        M = X.shape[0]
        fx = np.empty((M, self.n, self.n))
        fu = np.empty((M, self.n, self.m))
        J = mean_gradient(self.gp, np.hstack([X, U]))
        fx[:, self.gp_rows], fu[:, self.gp_rows] = J[:, :, : self.n], J[:, :, self.n:]
        for k in range(M):
            kx, ku = self.known_jac(X[k], U[k])
            fx[k, self.known_rows], fu[k, self.known_rows] = kx, ku
        return fx, fu


class ExactDynamics:
    """A known vector field ``f(X, U)`` (batched) with analytic Jacobians and zero variance."""

    def __init__(self, f: Callable, jac: Callable, state_dim: int, control_dim: int, mode: str = CONTINUOUS):
        self.f = f
        self.jac = jac
        self.n = state_dim
        self.m = control_dim
        self.mode = mode

    def predict_batch(self, X, U, var_rows=None, return_var=True):
        mean = self.f(np.atleast_2d(X), np.atleast_2d(U))
        return mean, (np.zeros_like(mean) if return_var else None)

    def predict(self, x, u, var_rows=None, return_var=True):
        mean, var = self.predict_batch(np.asarray(x, float)[None], np.asarray(u, float)[None],
                                       return_var=return_var)
        return mean[0], (None if var is None else var[0])

    def jacobians(self, x, u):
        return self.jac(np.asarray(x, float), np.asarray(u, float))

    def jacobians_batch(self, X, U):
        pairs = [self.jac(x, u) for x, u in zip(np.atleast_2d(X), np.atleast_2d(U))]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def transition(dynamics, X, U, dt: float, var_rows=None, return_var=True):
    """Mean next state and its per-row variance for a batch of (x, u).

    Continuous mode uses an Euler step ``x + dt * E[f]`` (variance scaled by
    dt^2); discrete mode adds the predicted delta.
    """
    mean, var = dynamics.predict_batch(X, U, var_rows=var_rows, return_var=return_var)
    if dynamics.mode == DISCRETE:
        return np.atleast_2d(X) + mean, var
    return np.atleast_2d(X) + dt * mean, (None if var is None else dt * dt * var)


def transition_jacobians(dynamics, x, u, dt: float):
    """Jacobians of the one-step mean map at (x, u)."""
    fx, fu = dynamics.jacobians(x, u)
    if dynamics.mode == DISCRETE:
        return np.eye(dynamics.n) + fx, fu
    return np.eye(dynamics.n) + dt * fx, dt * fu


def transition_jacobians_batch(dynamics, X, U, dt: float):
    fx, fu = dynamics.jacobians_batch(X, U)
    eye = np.eye(dynamics.n)[None]
    if dynamics.mode == DISCRETE:
        return eye + fx, fu
    return eye + dt * fx, dt * fu

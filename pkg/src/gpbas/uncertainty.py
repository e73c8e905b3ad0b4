"""First-order belief propagation through the embedded model and Monte Carlo safety checks."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import binomtest

from .barrier import EmbeddedModel, barrier_gradient, barrier_of_state, embedded_step, embedded_step_jacobians
from .dynamics import transition
from .errors import InvalidArgumentError, InvariantError

logger = logging.getLogger(__name__)


def repair_psd(cov, tol: float = 1e-10) -> np.ndarray:
    """Symmetrize and clamp negative eigenvalues at zero."""
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    if w.min() >= 0.0:
        return cov
    if w.min() < -tol * max(1.0, abs(w.max())):
        logger.debug("clamping eigenvalue %.3e", w.min())
    out = (V * np.clip(w, 0.0, None)) @ V.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise InvalidArgumentError(f"covariance shape {cov.shape} does not match mean dim {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise InvariantError("belief covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", repair_psd(cov))

    @classmethod
    def point(cls, mean) -> "GaussianBelief":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, np.zeros((mean.size, mean.size)))


def predictive_covariance(xbar, u, model: EmbeddedModel, x_next=None) -> np.ndarray:
    """One-step process covariance of ``[x; z]`` from the GP variance at the mean.

    The state block is ``diag(V) dt^2`` (``diag(V)`` in discrete mode); the
    barrier-state block pushes it through ``d(B o h)/dx`` at the next mean state.
    """
    n, q = model.n, model.q
    x = np.asarray(xbar, dtype=float)[:n]
    mean, var = transition(model.dynamics, x[None], np.asarray(u, float)[None], model.dt)
    var = np.clip(var[0], 0.0, None)
    x_next = mean[0] if x_next is None else x_next
    G = np.eye(n)
    if q:
        G = np.vstack([G, barrier_gradient(x_next, model.safety, model.config)])
    return (G * var) @ G.T


def propagate_belief(belief: GaussianBelief, u, model: EmbeddedModel, gain=None) -> GaussianBelief:
    """Push a Gaussian belief through one step of the embedded model (first-order Taylor).

    The mean follows the GP-mean step; the covariance is
    ``J cov J^T + Sigma_pred`` where ``J`` is the embedded-step Jacobian,
    ``J_x - J_u K`` when a feedback ``gain`` K is given.
    """
    mean = embedded_step(belief.mean, u, model, use_bound=False)
    A, B = embedded_step_jacobians(belief.mean, np.asarray(u, float), model, x_next=mean[: model.n])
    if gain is not None:
        A = A - B @ np.asarray(gain, dtype=float)
    cov = A @ belief.cov @ A.T + predictive_covariance(belief.mean, u, model, mean[: model.n])
    return GaussianBelief(mean, repair_psd(cov))


def propagate_trajectory(x0_belief: GaussianBelief, controls, model: EmbeddedModel, gains=None):
    """Beliefs along an open-loop (or gain-stabilized) control sequence; length N+1."""
    out = [x0_belief]
    for k, u in enumerate(controls):
        out.append(propagate_belief(out[-1], u, model, None if gains is None else gains[k]))
    return out


# -- Monte Carlo ------------------------------------------------------------------

@dataclass
class SafetyReport:
    fraction_safe: float
    samples: int
    horizon: int
    min_h_quantiles: list
    first_violation_histogram: list  # entry k counts samples whose first violation is at step k
    ci_low: float
    ci_high: float
    standard_error: float
    rho: float | None = None

    @property
    def meets_rho(self) -> bool | None:
        """Whether ``fraction_safe >= rho - 2 SE`` (None without a target)."""
        if self.rho is None:
            return None
        return self.fraction_safe >= self.rho - 2.0 * self.standard_error

    def to_dict(self) -> dict:
        d = asdict(self)
        d["meets_rho"] = self.meets_rho
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _embedded_step_batch(Xbar, U, model: EmbeddedModel, use_bound: bool):
    """Mean embedded step for many states; returns next states, their variances and a validity mask."""
    n, q = model.n, model.q
    X, Z = Xbar[:, :n], Xbar[:, n:]
    mean, var = transition(model.dynamics, X, U, model.dt)
    var = np.clip(var, 0.0, None)
    nxt = np.full(Xbar.shape, np.nan)
    nxt[:, :n] = mean
    if q == 0:
        return nxt, var, np.ones(len(X), bool)
    ok = np.all(model.safety.eval(mean) > 0.0, axis=1) & np.all(model.safety.eval(X) > 0.0, axis=1)
    if np.any(ok):
        cfg = model.config
        w = barrier_of_state(mean[ok], model.safety, cfg)
        if cfg.dbas_gamma:
            w = w - cfg.dbas_gamma * (Z[ok] + model.beta0 - barrier_of_state(X[ok], model.safety, cfg))
        if use_bound and cfg.phi > 0.0:
            g = barrier_gradient(mean[ok], model.safety, cfg)
            w = w + cfg.phi * np.sqrt(np.einsum("sqn,sn->sq", g * g, var[ok]))
        nxt[ok, n:] = w - model.beta0
    return nxt, var, ok


def sample_trajectories(model: EmbeddedModel, policy, x0, horizon: int, samples: int, seed: int,
                        use_bound=None, chunk_size: int = 1000):
    """Closed-loop rollouts with per-step Gaussian transitions drawn from the GP posterior.

    Each sample owns an independent random stream spawned from ``seed``, so
    results do not depend on ``chunk_size``. The barrier state is propagated
    by the model from the sampled state. A sample stops at its first step with
    ``min h <= 0`` (or when the model predicts leaving the safe set).
    Returns ``(h_min_path, first_violation)``: per-sample running minima of
    ``min h`` over visited steps, and the first violation step (-1 if none).
    """
    if samples < 1:
        raise InvalidArgumentError("samples must be >= 1")
    if horizon < 0:
        raise InvalidArgumentError("horizon must be >= 0")
    n = model.n
    use_bound = model.config.phi > 0.0 if use_bound is None else use_bound
    x0 = np.asarray(x0, dtype=float)
    xbar0 = model.initial_state(x0) if x0.size == n else x0
    streams = np.random.SeedSequence(seed).spawn(samples)
    h_min = np.empty(samples)
    first = np.full(samples, -1)
    for start in range(0, samples, chunk_size):
        idx = np.arange(start, min(start + chunk_size, samples))
        noise = np.stack([np.random.default_rng(streams[i]).standard_normal((horizon, n)) for i in idx])
        Xb = np.tile(xbar0, (len(idx), 1))
        alive = np.ones(len(idx), bool)
        hm = model.safety.min_h(Xb[:, :n]) if model.q else np.full(len(idx), np.inf)
        fv = np.where(hm <= 0.0, 0, -1)
        alive &= fv < 0
        for k in range(horizon):
            a = np.flatnonzero(alive)
            if a.size == 0:
                break
            U = np.atleast_2d(policy(k, Xb[a]))
            nxt, var, ok = _embedded_step_batch(Xb[a], U, model, use_bound)
            nxt[:, :n] += np.sqrt(var) * noise[a, k]
            if model.q:
                h = model.safety.min_h(nxt[:, :n])
                hm[a] = np.minimum(hm[a], h)
                bad = (h <= 0.0) | ~ok | ~np.all(np.isfinite(nxt), axis=1)
            else:
                bad = ~np.all(np.isfinite(nxt), axis=1)
            Xb[a] = nxt
            fv[a[bad]] = k + 1
            alive[a[bad]] = False
        h_min[idx] = hm
        first[idx] = fv
    return h_min, first


def mc_rollout(model: EmbeddedModel, policy, x0, horizon: int, samples: int, seed: int,
               rho: float | None = None, use_bound=None, chunk_size: int = 1000) -> SafetyReport:
    """Empirical probability that the closed loop stays safe under GP-posterior transitions."""
    h_min, first = sample_trajectories(model, policy, x0, horizon, samples, seed, use_bound, chunk_size)
    safe = int(np.sum(first < 0))
    frac = safe / samples
    ci = binomtest(safe, samples).proportion_ci(confidence_level=0.95, method="exact")
    hist = np.bincount(first[first >= 0], minlength=horizon + 1)[: horizon + 1]
    finite = h_min[np.isfinite(h_min)]
    quant = np.quantile(finite, [0.05, 0.5, 0.95]).tolist() if finite.size else [None, None, None]
    return SafetyReport(frac, samples, horizon, quant, hist.astype(int).tolist(), float(ci.low), float(ci.high),
                        float(np.sqrt(frac * (1.0 - frac) / samples)), rho)


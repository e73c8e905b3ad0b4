"""Exact Gaussian process regression with a squared-exponential ARD kernel.

One independent GP is fitted per output dimension. Each GP stores the
Cholesky factor of ``K(X, X) + noise * I`` and the weight vector
``alpha = K^-1 (F - offset)``, where ``offset`` is the empirical target mean
(equivalent to a constant prior mean) unless centering is disabled.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from .errors import InvalidArgumentError, NumericalError

logger = logging.getLogger(__name__)

CONTINUOUS = "continuous-derivative"
DISCRETE = "discrete-delta"
MODES = (CONTINUOUS, DISCRETE)

# Multiples of trace(K)/N added to the diagonal when Cholesky fails.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training pairs ``(x, u) -> f``.

    ``inputs`` is N x (n+m), ``targets`` is N x n. In continuous mode the
    targets are state derivatives; in discrete mode they are next-state deltas.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mode: str = CONTINUOUS

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.asarray(self.targets, dtype=float)
        if targets.ndim == 1:
            targets = targets[:, None]
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown dataset mode {self.mode!r}; expected one of {MODES}")
        if inputs.shape[0] < 1:
            raise InvalidArgumentError("dataset must contain at least one row")
        if inputs.shape[0] != targets.shape[0]:
            raise InvalidArgumentError(
                f"input rows ({inputs.shape[0]}) and target rows ({targets.shape[0]}) differ"
            )
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise InvalidArgumentError("dataset contains non-finite entries")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.targets[index], self.mode)


@dataclass(frozen=True, eq=False)
class KernelHyperparameters:
    """Signal variance, ARD lengthscales and noise variance of one GP."""

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        values = np.concatenate([[self.signal_variance], ls, [self.noise_variance]])
        if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
            raise InvalidArgumentError(f"hyperparameters must be finite and positive, got {values}")

    def to_log(self) -> np.ndarray:
        """Packed ``[log sf2, log l_1..l_D, log sn2]``."""
        return np.log(np.concatenate([[self.signal_variance], self.lengthscales, [self.noise_variance]]))

    @classmethod
    def from_log(cls, theta) -> "KernelHyperparameters":
        theta = np.asarray(theta, dtype=float)
        return cls(math.exp(theta[0]), np.exp(theta[1:-1]), math.exp(theta[-1]))

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": self.lengthscales.tolist(),
            "noise_variance": self.noise_variance,
        }

    @classmethod
    def from_dict(cls, d) -> "KernelHyperparameters":
        return cls(d["signal_variance"], d["lengthscales"], d["noise_variance"])


@dataclass(frozen=True, eq=False)
class GpModel:
    """Fitted independent GPs, one per output dimension."""

    dataset: Dataset
    hyper: tuple
    chol: tuple
    alpha: np.ndarray  # n x N
    offsets: np.ndarray  # n
    jitter: tuple = field(default=())

    @property
    def input_dim(self) -> int:
        return self.dataset.input_dim

    @property
    def output_dim(self) -> int:
        return self.dataset.output_dim

    @property
    def mode(self) -> str:
        return self.dataset.mode

    def gram(self, d: int) -> np.ndarray:
        """The regularized matrix ``K + (noise + jitter) I`` actually factorized for dim ``d``."""
        h = self.hyper[d]
        K = kernel_matrix(self.dataset.inputs, self.dataset.inputs, h)
        K[np.diag_indices_from(K)] += h.noise_variance + self.jitter[d]
        return K


def _check_vector(a, name):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return a


def kernel_eval(a, b, hyper: KernelHyperparameters) -> float:
    """Squared-exponential ARD kernel ``sf2 * exp(-0.5 * sum((a-b)^2 / l^2))``."""
    a = _check_vector(a, "a").ravel()
    b = _check_vector(b, "b").ravel()
    if a.shape != b.shape or a.shape != hyper.lengthscales.shape:
        raise InvalidArgumentError(
            f"kernel arguments must have dim {hyper.lengthscales.size}, got {a.size} and {b.size}"
        )
    r2 = float(np.sum(((a - b) / hyper.lengthscales) ** 2))
    return hyper.signal_variance * math.exp(-0.5 * r2)


def kernel_matrix(A, B, hyper: KernelHyperparameters) -> np.ndarray:
    ls = hyper.lengthscales
    r2 = cdist(np.atleast_2d(A) / ls, np.atleast_2d(B) / ls, "sqeuclidean")
    return hyper.signal_variance * np.exp(-0.5 * r2)


def _factorize(K: np.ndarray, noise: float):
    """Cholesky of ``K + noise I`` walking up the jitter ladder."""
    N = K.shape[0]
    scale = float(np.trace(K)) / N + noise
    tried = []
    for level in JITTER_LADDER:
        jitter = level * scale
        tried.append(noise + jitter)
        A = K.copy()
        A[np.diag_indices(N)] += noise + jitter
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0.0):
            if jitter > 0.0:
                logger.debug("Cholesky needed jitter %.3e", jitter)
            return L, jitter
    raise NumericalError(
        "kernel matrix is not positive definite; tried diagonal additions "
        + ", ".join(f"{t:.3e}" for t in tried),
        jitter_levels=tried,
    )


def gp_fit(data: Dataset, hyper, center: bool = True, offsets=None) -> GpModel:
    """Fit one exact GP per output dimension.

    Parameters
    ----------
    data : Dataset
    hyper : KernelHyperparameters or sequence of them
        A single instance is shared by all output dimensions.
    center : bool
        Subtract the empirical target mean before fitting (constant prior mean).
    offsets : array, optional
        Explicit prior mean per output dim; overrides ``center``.
    """
    n = data.output_dim
    if isinstance(hyper, KernelHyperparameters):
        hyper = [hyper] * n
    hyper = tuple(hyper)
    if len(hyper) != n:
        raise InvalidArgumentError(f"need {n} hyperparameter sets, got {len(hyper)}")
    for h in hyper:
        if h.lengthscales.size != data.input_dim:
            raise InvalidArgumentError(
                f"lengthscales have dim {h.lengthscales.size}, inputs have dim {data.input_dim}"
            )
    if offsets is None:
        offsets = data.targets.mean(axis=0) if center else np.zeros(n)
    offsets = np.asarray(offsets, dtype=float).reshape(n)
    chols, alphas, jitters = [], [], []
    for d in range(n):
        K = kernel_matrix(data.inputs, data.inputs, hyper[d])
        L, jitter = _factorize(K, hyper[d].noise_variance)
        y = data.targets[:, d] - offsets[d]
        chols.append(L)
        alphas.append(cho_solve((L, True), y))
        jitters.append(jitter)
    return GpModel(data, hyper, tuple(chols), np.array(alphas), offsets, tuple(jitters))


def _as_queries(model: GpModel, query) -> np.ndarray:
    Q = np.asarray(query, dtype=float)
    Q = Q[None, :] if Q.ndim == 1 else Q
    if Q.ndim != 2 or Q.shape[1] != model.input_dim:
        raise InvalidArgumentError(f"query must have dim {model.input_dim}, got shape {np.shape(query)}")
    if not np.all(np.isfinite(Q)):
        raise InvalidArgumentError("query contains non-finite entries")
    return Q


def predict(model: GpModel, queries, dims: Sequence[int] | None = None, return_var: bool = True):
    """Batched posterior mean (and variance) at M query rows.

    Returns arrays of shape M x n; with ``dims`` only those output columns are
    computed and the rest of the variance array is left at zero.
    """
    Q = _as_queries(model, queries)
    n = model.output_dim
    dims = range(n) if dims is None else dims
    mean = np.tile(model.offsets, (Q.shape[0], 1))
    var = np.zeros((Q.shape[0], n)) if return_var else None
    X = model.dataset.inputs
    for d in dims:
        h = model.hyper[d]
        Ks = kernel_matrix(Q, X, h)
        mean[:, d] += Ks @ model.alpha[d]
        if return_var:
            v = solve_triangular(model.chol[d], Ks.T, lower=True, check_finite=False)
            var_d = h.signal_variance - np.einsum("ij,ij->j", v, v)
            if np.any(var_d < 0.0):
                logger.debug("clamped %d negative predictive variances (min %.3e)",
                             int(np.sum(var_d < 0.0)), float(var_d.min()))
                var_d = np.maximum(var_d, 0.0)
            var[:, d] = var_d
    return (mean, var) if return_var else mean


def gp_posterior(model: GpModel, query):
    """Posterior mean and variance (each of dim n) at a single query."""
    mean, var = predict(model, query)
    return mean[0], var[0]


def mean_gradient(model: GpModel, queries, dims: Sequence[int] | None = None) -> np.ndarray:
    """Jacobians of the posterior mean, shape M x n x (n+m)."""
    Q = _as_queries(model, queries)
    X = model.dataset.inputs
    n, D = model.output_dim, model.input_dim
    out = np.zeros((Q.shape[0], n, D))
    dims = range(n) if dims is None else dims
    chunk = max(1, 2_000_000 // (X.shape[0] * D))
    for d in dims:
        h = model.hyper[d]
        inv_l2 = 1.0 / h.lengthscales**2
        for s in range(0, Q.shape[0], chunk):
            Qc = Q[s:s + chunk]
            w = kernel_matrix(Qc, X, h) * model.alpha[d]  # M x N
            # sum_i w_i (x*_j - x_ij) = x*_j sum_i w_i - sum_i w_i x_ij
            out[s:s + chunk, d, :] = -(Qc * w.sum(axis=1)[:, None] - w @ X) * inv_l2
    return out


def gp_posterior_gradient(model: GpModel, query) -> np.ndarray:
    """n x (n+m) Jacobian of the posterior mean at one query."""
    return mean_gradient(model, query)[0]


def _lml_dim(X, y, hyper: KernelHyperparameters, with_grad=True):
    """Log marginal likelihood of one output dim and its gradient over log-hyperparameters."""
    N = X.shape[0]
    Kf = kernel_matrix(X, X, hyper)
    L, jitter = _factorize(Kf, hyper.noise_variance)
    alpha = cho_solve((L, True), y)
    value = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * N * _LOG_2PI
    if not with_grad:
        return value, None
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(N))
    WK = W * Kf
    grad = np.empty(hyper.lengthscales.size + 2)
    grad[0] = 0.5 * WK.sum()
    for j, ell in enumerate(hyper.lengthscales):
        diff = X[:, j][:, None] - X[:, j][None, :]
        grad[1 + j] = 0.5 * np.sum(WK * diff**2) / ell**2
    grad[-1] = 0.5 * hyper.noise_variance * np.trace(W)
    return value, grad


def log_marginal_likelihood(model: GpModel):
    """Total log marginal likelihood and its gradient over the packed log-hyperparameters.

    The gradient concatenates ``[log sf2, log l, log sn2]`` for each output dim.
    The jitter (if any) used at fit time is not re-applied here.
    """
    X = model.dataset.inputs
    total, grads = 0.0, []
    for d in range(model.output_dim):
        y = model.dataset.targets[:, d] - model.offsets[d]
        v, g = _lml_dim(X, y, model.hyper[d])
        total += v
        grads.append(g)
    return total, np.concatenate(grads)


def default_hyperparameters(data: Dataset) -> list:
    """Data-scaled starting point for hyperparameter optimization."""
    span = np.ptp(data.inputs, axis=0)
    span = np.where(span > 0.0, span, 1.0)
    out = []
    for d in range(data.output_dim):
        vy = float(np.var(data.targets[:, d])) or 1.0
        out.append(KernelHyperparameters(vy, 0.5 * span, 1e-4 * vy))
    return out


def _log_bounds(data: Dataset, d: int):
    span = np.ptp(data.inputs, axis=0)
    span = np.where(span > 0.0, span, 1.0)
    vy = float(np.var(data.targets[:, d])) or 1.0
    lo = np.log(np.concatenate([[1e-4 * vy], 1e-2 * span, [1e-8 * vy]]))
    hi = np.log(np.concatenate([[1e6 * vy], 1e2 * span, [10.0 * vy]]))
    return lo, hi


def _optimize_dim(X, y, init: KernelHyperparameters, iters, lo, hi, tol=1e-6, max_step=2.0):
    """Quasi-Newton (BFGS) ascent with backtracking, in log-hyperparameter space."""
    theta = np.clip(init.to_log(), lo, hi)
    try:
        f, g = _lml_dim(X, y, KernelHyperparameters.from_log(theta))
    except NumericalError:
        theta = init.to_log()
        f, g = _lml_dim(X, y, init)
    trace = [f]
    H = np.eye(theta.size)
    for _ in range(iters):
        p = H @ g
        if g @ p <= 0.0:  # lost ascent direction; restart curvature
            H = np.eye(theta.size)
            p = g.copy()
        big = np.max(np.abs(p))
        if big > max_step:
            p *= max_step / big
        step, accepted, failed = 1.0, False, False
        while step > 1e-10:
            cand = np.clip(theta + step * p, lo, hi)
            try:
                fc, gc = _lml_dim(X, y, KernelHyperparameters.from_log(cand))
            except NumericalError:
                failed = True
                break
            if fc >= f + 1e-4 * (g @ (cand - theta)) and fc >= f:
                accepted = True
                break
            step *= 0.5
        if failed:
            logger.info("fit failed during hyperparameter step; keeping last valid parameters")
            break
        if not accepted:
            break
        s, yk = cand - theta, -(gc - g)
        sy = s @ yk
        if sy > 1e-12:
            rho = 1.0 / sy
            V = np.eye(theta.size) - rho * np.outer(s, yk)
            H = V @ H @ V.T + rho * np.outer(s, s)
        improvement = fc - f
        theta, f, g = cand, fc, gc
        trace.append(f)
        if improvement < tol:
            break
    return KernelHyperparameters.from_log(theta), trace


def optimize_hyperparameters(data: Dataset, init=None, iters: int = 200, center: bool = True,
                             return_trace: bool = False):
    """Maximize the log marginal likelihood independently for each output dim.

    Returns the list of optimized hyperparameters (and, with ``return_trace``,
    the per-dim objective values of every accepted step).
    """
    if iters < 1:
        raise InvalidArgumentError(f"iters must be >= 1, got {iters}")
    init = default_hyperparameters(data) if init is None else list(init)
    if len(init) != data.output_dim:
        raise InvalidArgumentError(f"need {data.output_dim} initial hyperparameter sets, got {len(init)}")
    offsets = data.targets.mean(axis=0) if center else np.zeros(data.output_dim)
    result, traces = [], []
    for d in range(data.output_dim):
        lo, hi = _log_bounds(data, d)
        h, trace = _optimize_dim(data.inputs, data.targets[:, d] - offsets[d], init[d], iters, lo, hi)
        logger.debug("dim %d: log-likelihood %.4f -> %.4f in %d steps", d, trace[0], trace[-1], len(trace) - 1)
        result.append(h)
        traces.append(trace)
    return (result, traces) if return_trace else result


def train_gp(data: Dataset, iters: int = 200, subsample: int | None = None, seed: int = 0,
             center: bool = True) -> GpModel:
    """Optimize hyperparameters (optionally on a random subsample) and fit on all data."""
    opt_data = data
    if subsample is not None and data.size > subsample:
        rng = np.random.default_rng(seed)
        opt_data = data.subset(np.sort(rng.choice(data.size, subsample, replace=False)))
    hyper = optimize_hyperparameters(opt_data, iters=iters, center=center)
    return gp_fit(data, hyper, center=center)


# -- persistence ------------------------------------------------------------

def model_to_dict(model: GpModel, metadata: dict | None = None) -> dict:
    return {
        "mode": model.mode,
        "inputs": model.dataset.inputs.tolist(),
        "targets": model.dataset.targets.tolist(),
        "hyperparameters": [h.to_dict() for h in model.hyper],
        "offsets": model.offsets.tolist(),
        "metadata": metadata or {},
    }


def model_from_dict(d: dict) -> GpModel:
    data = Dataset(np.array(d["inputs"], dtype=float), np.array(d["targets"], dtype=float), d["mode"])
    hyper = [KernelHyperparameters.from_dict(h) for h in d["hyperparameters"]]
    model = gp_fit(data, hyper, offsets=d["offsets"])
    check_model(model)
    return model


def check_model(model: GpModel, chol_tol: float = 1e-8, alpha_tol: float = 1e-6) -> None:
    """Verify the Cholesky reconstruction and weight-vector invariants."""
    for d in range(model.output_dim):
        K = model.gram(d)
        L = model.chol[d]
        err = np.linalg.norm(L @ L.T - K) / np.linalg.norm(K)
        if err > chol_tol:
            raise NumericalError(f"Cholesky reconstruction error {err:.2e} exceeds {chol_tol:.0e} (dim {d})")
        y = model.dataset.targets[:, d] - model.offsets[d]
        ynorm = np.linalg.norm(y)
        if ynorm > 0.0:
            res = np.linalg.norm(K @ model.alpha[d] - y) / ynorm
            if res > alpha_tol:
                raise NumericalError(f"weight-vector residual {res:.2e} exceeds {alpha_tol:.0e} (dim {d})")


def save_model(model: GpModel, path, metadata: dict | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, metadata), indent=1) + "\n")


def load_model(path):
    """Load a model file; returns ``(model, metadata)``."""
    d = json.loads(Path(path).read_text())
    return model_from_dict(d), d.get("metadata", {})

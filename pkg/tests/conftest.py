import time
from contextlib import contextmanager

import numpy as np
import pytest

from gpbas.barrier import BarrierConfig, CircleConstraint, EmbeddedModel, SafetyFunction
from gpbas.gp import CONTINUOUS

_ACCEPTANCE = []


class StubDynamics:
    """Gaussian dynamics with a user-given mean field and a constant diagonal variance."""

    def __init__(self, mean_fn, var, n, m, jac=None, mode=CONTINUOUS):
        self.mean_fn = mean_fn
        self.var = np.broadcast_to(np.asarray(var, dtype=float), (n,)).copy()
        self.jac = jac
        self.n, self.m, self.mode = n, m, mode

    def predict_batch(self, X, U, var_rows=None, return_var=True):
        X, U = np.atleast_2d(X), np.atleast_2d(U)
        mean = self.mean_fn(X, U)
        if not return_var:
            return mean, None
        var = np.tile(self.var, (X.shape[0], 1))
        if var_rows is not None:
            mask = np.zeros(self.n, bool)
            mask[list(var_rows)] = True
            var[:, ~mask] = 0.0
        return mean, var

    def predict(self, x, u, var_rows=None, return_var=True):
        mean, var = self.predict_batch(np.asarray(x)[None], np.asarray(u)[None], var_rows, return_var)
        return mean[0], (None if var is None else var[0])

    def jacobians(self, x, u):
        return self.jac(np.asarray(x, float), np.asarray(u, float))

    def jacobians_batch(self, X, U):
        pairs = [self.jacobians(x, u) for x, u in zip(X, U)]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def linear_stub(A, B, var=0.0):
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    return StubDynamics(lambda X, U: X @ A.T + U @ B.T, var, A.shape[0], B.shape[1], jac=lambda x, u: (A, B))


def random_safe_point(rng, safety, n, scale=3.0, min_h=0.2):
    while True:
        x = rng.uniform(-scale, scale, n)
        if np.all(safety.eval(x) > min_h):
            return x


def random_circles(rng, n, count, indices=(0, 1)):
    return SafetyFunction([CircleConstraint(rng.uniform(-2, 2, len(indices)), rng.uniform(0.3, 1.0), indices)
                           for _ in range(count)], n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Time a block and record one acceptance line (pass/fail and the time limit)."""

    @contextmanager
    def run(name, limit_s):
        start = time.perf_counter()
        try:
            yield
        except BaseException as err:
            _ACCEPTANCE.append((name, False, time.perf_counter() - start, limit_s, f"{type(err).__name__}: {err}"))
            raise
        elapsed = time.perf_counter() - start
        ok = elapsed < limit_s
        _ACCEPTANCE.append((name, ok, elapsed, limit_s, "" if ok else "time limit exceeded"))
        assert ok, f"{name} took {elapsed:.1f}s (limit {limit_s}s)"

    return run


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, elapsed, limit, note in _ACCEPTANCE:
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] {name} ({elapsed:.1f}s / limit {limit:.0f}s)"
        terminalreporter.write_line(line + (f" -- {note}" if note else ""))


def make_embedded(dynamics, safety, dt=0.05, **cfg):
    return EmbeddedModel(dynamics, safety, BarrierConfig(**cfg), dt)

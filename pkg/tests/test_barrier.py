import math

import numpy as np
import pytest
from scipy.special import erf

from conftest import StubDynamics, linear_stub, make_embedded, random_circles, random_safe_point
from gpbas.barrier import (
    PER_CONSTRAINT,
    BarrierConfig,
    EmbeddedState,
    ExpressionConstraint,
    SafetyFunction,
    barrier_deriv,
    barrier_gradient,
    barrier_inverse,
    barrier_of_state,
    barrier_offset,
    bas_coefficient,
    bas_rhs,
    bas_upper_bound,
    dbas_gradients,
    dbas_step,
    embedded_jacobians_lqr,
    embedded_step,
    gp_bas_moments,
    quantile_phi,
    barrier_value,
)
from gpbas.control import LqrPolicy, gpbas_lqr, rollout_policy
from gpbas.dynamics import transition
from gpbas.environments import linear_env
from gpbas.errors import BoundaryViolationError, InvalidArgumentError, InvariantError


def scalar_safety():
    """h(x) = x on a 1-D state."""
    return SafetyFunction([ExpressionConstraint(lambda X: X[..., 0], lambda X: np.ones(X.shape), "x")], 1)


class TestBarrierFunctions:
    def test_closed_form(self):
        assert barrier_value("inverse", 1.0) == 1.0
        assert barrier_value("inverse", 0.5) == 2.0
        assert barrier_deriv("inverse", 1.0) == -1.0

    def test_round_trip(self):
        assert barrier_inverse("inverse", barrier_value("inverse", 0.37)) == pytest.approx(0.37, rel=1e-12)

    def test_blow_up(self):
        assert barrier_value("inverse", 1e-3) == pytest.approx(1000.0)
        assert barrier_value("inverse", 1e-3) > barrier_value("inverse", 1e-2)

    @pytest.mark.parametrize("h", [0.0, -0.5])
    def test_unsafe_raises(self, h):
        with pytest.raises(BoundaryViolationError):
            barrier_value("inverse", h)
        with pytest.raises(BoundaryViolationError):
            barrier_deriv("inverse", h)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            barrier_value("log", 1.0)


class TestSafetyFunction:
    def test_circle_center_value(self):
        env = linear_env()
        assert env.safety.eval(np.array([2.0, 2.2]))[0] == pytest.approx(-1.0)

    def test_gradient_finite_differences(self, rng):
        sf = random_circles(rng, 3, 3)
        for _ in range(50):
            x = random_safe_point(rng, sf, 3)
            G = sf.grad(x)
            for j in range(3):
                e = np.zeros(3)
                e[j] = 1e-6
                fd = (sf.eval(x + e) - sf.eval(x - e)) / 2e-6
                np.testing.assert_allclose(G[:, j], fd, rtol=1e-5, atol=1e-8)

    def test_from_config(self):
        sf = SafetyFunction.from_config([
            {"type": "circle", "center": [0, 0], "radius": 1.0, "margin": 0.5},
            {"type": "expression", "name": "halfspace", "params": {"normal": [0, 1], "offset": -3}},
        ], 2)
        np.testing.assert_allclose(sf.eval(np.array([2.0, 0.0])), [4.0 - 2.25, 3.0])
        assert sf.rows == [0, 1]
        with pytest.raises(InvalidArgumentError):
            SafetyFunction.from_config([{"type": "polygon"}], 2)


class TestConfig:
    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            BarrierConfig(gamma=-1.0)
        with pytest.raises(InvalidArgumentError):
            BarrierConfig(dbas_gamma=1.0)
        with pytest.raises(InvalidArgumentError):
            BarrierConfig(phi=-0.1)

    def test_unsafe_shift_point(self):
        with pytest.raises(BoundaryViolationError):
            barrier_offset(linear_env().safety, BarrierConfig(shift_point=np.array([2.0, 2.2])))


class TestBasRhs:
    def test_consistent_state_at_rest(self, rng):
        sf = random_circles(rng, 2, 1)
        cfg = BarrierConfig(gamma=2.0, shift_point=random_safe_point(rng, sf, 2))
        x = random_safe_point(rng, sf, 2)
        z = barrier_of_state(x, sf, cfg) - barrier_offset(sf, cfg)
        np.testing.assert_allclose(bas_rhs(x, z, np.zeros(2), sf, cfg), 0.0, atol=1e-12)

    def test_gamma_zero_is_pure_drift(self, rng):
        sf = random_circles(rng, 2, 1)
        cfg = BarrierConfig(gamma=0.0)
        x, xdot = random_safe_point(rng, sf, 2), rng.normal(size=2)
        z = barrier_of_state(x, sf, cfg) + 0.3
        coef = bas_coefficient(x, z, sf, cfg)
        np.testing.assert_array_equal(bas_rhs(x, z, xdot, sf, cfg), coef @ xdot)

    def test_scalar_hand_value(self):
        sf = scalar_safety()
        cfg = BarrierConfig(gamma=1.0, shift_point=np.array([1.0]))
        x = np.array([2.0])
        z = barrier_of_state(x, sf, cfg) - barrier_offset(sf, cfg)
        assert bas_rhs(x, z, np.array([1.0]), sf, cfg)[0] == pytest.approx(-0.25, abs=1e-14)

    def test_sum_mode_composite_derivative(self, rng):
        sf = random_circles(rng, 2, 3)
        cfg = BarrierConfig()
        x = random_safe_point(rng, sf, 2)
        coef = bas_coefficient(x, np.zeros(1), sf, cfg)
        np.testing.assert_allclose(coef, barrier_gradient(x, sf, cfg))


class TestDbas:
    def test_fixed_point(self, rng):
        sf = random_circles(rng, 2, 2)
        cfg = BarrierConfig(dbas_gamma=0.4)
        x = random_safe_point(rng, sf, 2)
        w = barrier_of_state(x, sf, cfg)
        np.testing.assert_allclose(dbas_step(x, w, x, sf, cfg), w)

    def test_gamma_zero_recomputes(self, rng):
        sf = random_circles(rng, 2, 2)
        cfg = BarrierConfig(dbas_gamma=0.0)
        x, y = random_safe_point(rng, sf, 2), random_safe_point(rng, sf, 2)
        np.testing.assert_array_equal(dbas_step(x, [123.0], y, sf, cfg), barrier_of_state(y, sf, cfg))

    def test_scalar_hand_value(self):
        cfg = BarrierConfig(dbas_gamma=0.5)
        out = dbas_step(np.array([2.0]), np.array([0.5]), np.array([1.0]), scalar_safety(), cfg)
        assert out[0] == pytest.approx(1.0, abs=1e-15)

    def test_unsafe_next_state(self):
        with pytest.raises(BoundaryViolationError):
            dbas_step(np.array([1.0]), [1.0], np.array([-0.1]), scalar_safety(), BarrierConfig())

    @pytest.mark.parametrize("gamma", [0.0, 0.3, 0.9])
    def test_dwdw_structure(self, rng, gamma):
        sf = random_circles(rng, 2, 3)
        cfg = BarrierConfig(dbas_gamma=gamma, combine=PER_CONSTRAINT)
        x = random_safe_point(rng, sf, 2)
        _, dwdw, _ = dbas_gradients(x, barrier_of_state(x, sf, cfg), np.zeros(1), np.eye(2), np.ones((2, 1)), x, sf, cfg)
        np.testing.assert_array_equal(dwdw, -gamma * np.eye(3))


def dbas_fd_blocks(x, w, u, step_fn, sf, cfg, eps=1e-6):
    """Central differences of ``w -> dbas_step(x, w, F(x, u))`` in x, w and u."""
    def g(x_, w_, u_):
        return dbas_step(x_, w_, step_fn(x_, u_), sf, cfg)

    cols = lambda f, v: np.array([(f(v + e) - f(v - e)) / (2 * eps) for e in eps * np.eye(v.size)]).T
    return (cols(lambda v: g(v, w, u), x), cols(lambda v: g(x, v, u), w), cols(lambda v: g(x, w, v), u))


def check_dbas_instance(rng, combine):
    sf = random_circles(rng, 2, 2)
    cfg = BarrierConfig(dbas_gamma=rng.uniform(0, 0.9), combine=combine)
    A = np.eye(2) + 0.05 * rng.normal(size=(2, 2))
    B = 0.05 * rng.normal(size=(2, 1))
    step = lambda x, u: A @ x + B @ u
    while True:
        x, u = random_safe_point(rng, sf, 2), rng.normal(size=1)
        if np.all(sf.eval(step(x, u)) > 0.1):
            break
    w = barrier_of_state(x, sf, cfg) + rng.normal(size=barrier_of_state(x, sf, cfg).size)
    analytic = dbas_gradients(x, w, u, A, B, step(x, u), sf, cfg)
    numeric = dbas_fd_blocks(x, w, u, step, sf, cfg)
    errors = []
    for a, f in zip(analytic, numeric):
        errors.append(np.linalg.norm(a - f) / max(np.linalg.norm(f), 1e-6))
    return max(errors)


class TestDbasGradients:
    @pytest.mark.parametrize("combine", ["sum", PER_CONSTRAINT])
    def test_finite_differences(self, rng, combine):
        worst = max(check_dbas_instance(rng, combine) for _ in range(25))
        assert worst < 1e-4


class TestMoments:
    def test_zero_variance_matches_rhs(self, rng):
        sf = random_circles(rng, 2, 1)
        A = np.array([[0.0, 1.0], [-1.0, -0.3]])
        dyn = linear_stub(A, np.array([[0.0], [1.0]]), var=0.0)
        x = random_safe_point(rng, sf, 2)
        model = make_embedded(dyn, sf, shift_point=random_safe_point(rng, sf, 2))
        z, u = model.consistent_z(x) + 0.1, np.array([0.4])
        mu, s2 = gp_bas_moments(x, z, u, model)
        np.testing.assert_allclose(s2, 0.0)
        xdot = dyn.predict(x, u)[0]
        np.testing.assert_allclose(mu, bas_rhs(x, z, xdot, sf, model.config, model.beta0))

    def test_flat_gradient_gives_zero_variance(self):
        flat = ExpressionConstraint(lambda X: 1.0 + 0.0 * X[..., 0], lambda X: np.zeros(X.shape), "flat")
        model = make_embedded(StubDynamics(lambda X, U: X, 5.0, 2, 1), SafetyFunction([flat], 2))
        _, s2 = gp_bas_moments(np.ones(2), model.consistent_z(np.ones(2)), np.zeros(1), model)
        assert np.all(s2 == 0.0)

    def test_scalar_variance_and_monte_carlo(self):
        # with h(x) = x and a consistent barrier state, Bcal = B'(h) = -1/x^2; pick |Bcal| = 0.3
        x = np.array([1.0 / math.sqrt(0.3)])
        model = make_embedded(StubDynamics(lambda X, U: 0.7 + 0.0 * X, 4.0, 1, 1), scalar_safety(), gamma=0.5)
        z = model.consistent_z(x)
        mu, s2 = gp_bas_moments(x, z, np.zeros(1), model)
        assert s2[0, 0] == pytest.approx(0.36, rel=1e-12)
        f = np.random.default_rng(0).normal(0.7, 2.0, 100_000)
        coef = bas_coefficient(x, z, model.safety, model.config, model.beta0)[0, 0]
        samples = coef * f - model.config.gamma * (z + model.beta0 - barrier_of_state(x, model.safety, model.config))
        se = 0.36 * math.sqrt(2.0 / (f.size - 1))
        assert abs(samples.var(ddof=1) - 0.36) < 3 * se
        assert abs(samples.mean() - mu[0]) < 3 * math.sqrt(0.36 / f.size)

    def test_unsafe_state(self):
        model = make_embedded(StubDynamics(lambda X, U: X, 1.0, 1, 1), scalar_safety())
        with pytest.raises(BoundaryViolationError):
            gp_bas_moments(np.array([-1.0]), np.zeros(1), np.zeros(1), model)


def bisect_phi(rho):
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * (1 + erf(mid / math.sqrt(2))) < rho:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestQuantile:
    def test_median(self):
        assert quantile_phi(0.5) == 0.0

    @pytest.mark.parametrize("rho, expected", [(0.9772, 1.9991), (0.8413, 0.9998)])
    def test_known_values(self, rho, expected):
        assert quantile_phi(rho) == pytest.approx(expected, abs=1e-4)
        assert quantile_phi(rho) == pytest.approx(bisect_phi(rho), abs=1e-8)

    @pytest.mark.parametrize("rho", [0.0, 1.0, -0.2, 1.5])
    def test_domain(self, rho):
        with pytest.raises(InvalidArgumentError):
            quantile_phi(rho)


class TestUpperBound:
    def test_disabled(self, rng):
        mu = rng.normal(size=3)
        np.testing.assert_array_equal(bas_upper_bound(mu, np.eye(3), 0.0), mu)

    def test_hand_value(self):
        assert bas_upper_bound([1.0], [[4.0]], 2.0)[0] == 5.0

    def test_monotone_in_phi(self, rng):
        for _ in range(50):
            L = rng.normal(size=(3, 3))
            mu, S = rng.normal(size=3), L @ L.T
            p1, p2 = sorted(rng.uniform(0, 4, 2))
            assert np.all(bas_upper_bound(mu, S, p1) <= bas_upper_bound(mu, S, p2))

    def test_negative_diagonal(self):
        with pytest.raises(InvariantError):
            bas_upper_bound([0.0], [[-1.0]], 1.0)


class TestEmbeddedStep:
    def setup_model(self, var, phi):
        env = linear_env()
        dyn = linear_stub(np.array([[1.0, -5.0], [0.0, -1.0]]), np.array([[0.0], [1.0]]), var=var)
        return env, make_embedded(dyn, env.safety, dt=env.dt, shift_point=env.goal, phi=phi)

    def test_deterministic_rollout_when_noise_off(self):
        env, model = self.setup_model(0.0, 0.0)
        xbar = model.initial_state(env.x0)
        x = env.x0.copy()
        w = barrier_of_state(x, env.safety, model.config)
        for k in range(20):
            u = np.array([-0.5])
            x_next = transition(model.dynamics, x[None], u[None], env.dt, return_var=False)[0][0]
            w = dbas_step(x, w, x_next, env.safety, model.config)
            x = x_next
            xbar = embedded_step(xbar, u, model, use_bound=True)
            np.testing.assert_allclose(xbar, np.concatenate([x, w - model.beta0]), atol=1e-14)

    def test_accepts_embedded_state(self):
        env, model = self.setup_model(0.0, 0.0)
        s = EmbeddedState(env.x0, model.consistent_z(env.x0))
        out = embedded_step(s, np.zeros(1), model)
        assert isinstance(out, EmbeddedState)
        np.testing.assert_array_equal(out.vector, embedded_step(s.vector, np.zeros(1), model))

    def test_bound_dominates_mean(self, rng):
        env, model = self.setup_model(0.5, quantile_phi(0.95))
        a = b = model.initial_state(env.x0)
        for k in range(50):
            u = rng.normal(size=1)
            a, b = embedded_step(a, u, model, use_bound=True), embedded_step(b, u, model, use_bound=False)
            assert np.all(a[2:] >= b[2:])

    def test_violation_raises(self):
        env, model = self.setup_model(0.0, 0.0)
        with pytest.raises(BoundaryViolationError):
            embedded_step(model.initial_state(np.array([2.0, 1.3])), np.zeros(1), model)

    def test_safe_lqr_rollout_on_true_linear_model(self):
        env = linear_env()
        model = env.embedded_model()
        cost = env.cost(model.config)
        policy = LqrPolicy(gpbas_lqr(model, cost, "zoh"), cost.goal, env.u_ref)
        ro = rollout_policy(model, policy, env.x0, 20, true_step=env.step)
        assert ro.safe and np.all(ro.h_min > 0.0)

    def test_dbas_consistency_exact_dynamics(self, rng):
        env = linear_env()
        model = env.embedded_model()
        xbar = model.initial_state(env.x0)
        for _ in range(30):
            xbar = embedded_step(xbar, rng.normal(size=1), model)
            np.testing.assert_allclose(xbar[2:], model.consistent_z(xbar[:2]), rtol=1e-12)


def lqr_fd(model, u0, eps=1e-6):
    """Central differences of ``[f(x, u); bas_rhs(x, z, f(x, u))]`` at (shift point, 0, u0)."""
    n, q = model.n, model.q
    x0 = model.config.shift_point

    def F(v, u):
        x, z = v[:n], v[n:]
        xdot = model.dynamics.predict(x, u)[0]
        return np.concatenate([xdot, bas_rhs(x, z, xdot, model.safety, model.config, model.beta0)])

    v0 = np.concatenate([x0, np.zeros(q)])
    A = np.array([(F(v0 + e, u0) - F(v0 - e, u0)) / (2 * eps) for e in eps * np.eye(n + q)]).T
    B = np.array([(F(v0, u0 + e) - F(v0, u0 - e)) / (2 * eps) for e in eps * np.eye(model.m)]).T
    return A, B


class TestLqrJacobians:
    def test_gamma_zero(self):
        env = linear_env()
        A, _ = embedded_jacobians_lqr(env.embedded_model(gamma=0.0))
        assert A[2, 2] == 0.0
        model = env.embedded_model(gamma=0.0)
        coef = bas_coefficient(env.goal, np.zeros(1), env.safety, model.config, model.beta0)
        np.testing.assert_allclose(A[2, :2], (coef @ env.jac(env.goal, env.u_ref)[0])[0])

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 3.0])
    def test_bottom_right(self, gamma):
        A, _ = embedded_jacobians_lqr(linear_env().embedded_model(gamma=gamma))
        assert A[2, 2] == -gamma

    def test_true_linear_finite_differences(self):
        model = linear_env().embedded_model(gamma=1.5)
        A, B = embedded_jacobians_lqr(model)
        Af, Bf = lqr_fd(model, np.zeros(1))
        np.testing.assert_allclose(A, Af, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(B, Bf, rtol=1e-6, atol=1e-8)

    def test_needs_shift_point(self):
        env = linear_env()
        with pytest.raises(InvalidArgumentError):
            embedded_jacobians_lqr(env.embedded_model(shift=False))


class TestBarrierImplication:
    """Large barrier states only occur near the boundary (inverse barrier: z > 1/eps implies h < eps)."""

    def test_on_rollouts(self, rng):
        env = linear_env()
        model = env.embedded_model(shift=False)
        eps_h = 1e-3
        for _ in range(10):
            xbar = model.initial_state(random_safe_point(rng, env.safety, 2, scale=4.0))
            for _ in range(100):
                try:
                    xbar = embedded_step(xbar, rng.normal(size=1), model)
                except BoundaryViolationError:
                    break
                assert np.all(np.isfinite(xbar))
                if xbar[2] > 1.0 / eps_h:
                    assert env.safety.min_h(xbar[:2]) < eps_h

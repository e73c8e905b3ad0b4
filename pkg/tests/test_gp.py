import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpbas.errors import InvalidArgumentError, NumericalError
from gpbas.gp import (
    DISCRETE,
    Dataset,
    KernelHyperparameters,
    check_model,
    gp_fit,
    gp_posterior,
    gp_posterior_gradient,
    kernel_eval,
    kernel_matrix,
    load_model,
    log_marginal_likelihood,
    optimize_hyperparameters,
    predict,
    save_model,
    train_gp,
)


def hyp(sf2=1.0, ls=(1.0,), sn2=1e-10):
    return KernelHyperparameters(sf2, np.asarray(ls, float), sn2)


def random_model(rng, N=5, D=2, n=1, sn2=1e-3):
    data = Dataset(rng.normal(size=(N, D)), rng.normal(size=(N, n)))
    hyper = [hyp(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0, D), sn2) for _ in range(n)]
    return gp_fit(data, hyper)


def dense_posterior(model, q):
    """Direct formula with an explicit inverse."""
    X = model.dataset.inputs
    means, variances = [], []
    for d, h in enumerate(model.hyper):
        K = kernel_matrix(X, X, h) + (h.noise_variance + model.jitter[d]) * np.eye(len(X))
        Kinv = np.linalg.inv(K)
        ks = kernel_matrix(q[None], X, h)[0]
        y = model.dataset.targets[:, d] - model.offsets[d]
        means.append(model.offsets[d] + ks @ Kinv @ y)
        variances.append(h.signal_variance - ks @ Kinv @ ks)
    return np.array(means), np.array(variances)


class TestKernel:
    def test_identity(self):
        assert kernel_eval([0, 0], [0, 0], hyp(ls=(1, 1))) == 1.0

    def test_unit_offset(self):
        assert kernel_eval([1, 0], [0, 0], hyp(ls=(1, 1))) == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_ard_hand_value(self):
        assert kernel_eval([1, 2], [0, 0], hyp(2.0, (1, 2))) == pytest.approx(2 * math.exp(-1.0), rel=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            kernel_eval([np.nan, 0], [0, 0], hyp(ls=(1, 1)))

    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
    @settings(max_examples=50, deadline=None)
    def test_symmetric(self, a, b):
        h = hyp(1.3, (0.5, 1.0, 2.0))
        assert kernel_eval(a, b, h) == kernel_eval(b, a, h)
        assert kernel_eval(a, a, h) == 1.3

    def test_hyperparameters_positive(self):
        with pytest.raises(InvalidArgumentError):
            KernelHyperparameters(1.0, [1.0, -1.0], 1e-3)


class TestFit:
    def test_single_point(self):
        model = gp_fit(Dataset([[0.0]], [[3.0]]), hyp(sn2=1e-12), center=False)
        assert model.alpha[0, 0] == pytest.approx(3.0, rel=1e-6)

    def test_three_point_dense_inverse(self):
        X = np.array([[-1.0], [0.2], [1.5]])
        y = np.array([0.3, -0.7, 1.1])
        h = hyp(1.5, (0.8,), 1e-2)
        model = gp_fit(Dataset(X, y), h, center=False)
        K = kernel_matrix(X, X, h) + 1e-2 * np.eye(3)
        np.testing.assert_allclose(model.alpha[0], np.linalg.inv(K) @ y, rtol=0, atol=1e-10)

    def test_duplicate_rows_never_nan(self):
        X = np.array([[0.0], [0.0], [1.0]])
        h = KernelHyperparameters(1.0, [1.0], 1e-300)
        try:
            model = gp_fit(Dataset(X, [1.0, 1.0, 2.0]), h)
        except NumericalError as err:
            assert err.jitter_levels
        else:
            assert np.all(np.isfinite(model.alpha))
            assert max(model.jitter) > 0.0

    def test_invariants_hold(self, rng):
        check_model(random_model(rng, N=30, D=3, n=2))

    def test_mismatched_lengthscales(self):
        with pytest.raises(InvalidArgumentError):
            gp_fit(Dataset([[0.0, 1.0]], [[1.0]]), hyp(ls=(1.0,)))

    def test_dataset_validation(self):
        with pytest.raises(InvalidArgumentError):
            Dataset(np.zeros((0, 2)), np.zeros((0, 1)))
        with pytest.raises(InvalidArgumentError):
            Dataset([[0.0], [1.0]], [[1.0]])
        with pytest.raises(InvalidArgumentError):
            Dataset([[np.inf]], [[1.0]])

    def test_deterministic(self, rng):
        data = Dataset(rng.normal(size=(20, 2)), rng.normal(size=(20, 2)))
        h = [hyp(1.0, (1.0, 1.0), 1e-3)] * 2
        a, b = gp_fit(data, h), gp_fit(data, h)
        assert np.array_equal(a.alpha, b.alpha)
        assert all(np.array_equal(x, y) for x, y in zip(a.chol, b.chol))


class TestPosterior:
    def test_interpolates_training_data(self, rng):
        X = rng.uniform(-3, 3, size=(15, 2))
        y = np.sin(X[:, 0]) + X[:, 1] ** 2
        model = gp_fit(Dataset(X, y), hyp(1.0, (1.0, 1.0), 1e-10))
        mean, var = predict(model, X)
        assert np.max(np.abs(mean[:, 0] - y)) <= 1e-4
        assert np.max(var) <= 1e-6

    def test_prior_reversion(self):
        model = gp_fit(Dataset([[0.0]], [[2.0]]), hyp(1.7, (1.0,), 1e-4), center=False)
        mean, var = gp_posterior(model, [15.0])
        assert abs(mean[0]) < 1e-12
        assert var[0] == pytest.approx(1.7, rel=1e-12)

    def test_matches_dense_formula(self, rng):
        for _ in range(10):
            model = random_model(rng, N=3, D=2, n=2)
            q = rng.normal(size=2)
            mean, var = gp_posterior(model, q)
            m_ref, v_ref = dense_posterior(model, q)
            np.testing.assert_allclose(mean, m_ref, rtol=0, atol=1e-10)
            np.testing.assert_allclose(var, v_ref, rtol=0, atol=1e-10)

    def test_variance_below_prior(self, rng):
        model = random_model(rng, N=40, D=3, n=2, sn2=1e-8)
        _, var = predict(model, rng.normal(scale=3, size=(500, 3)))
        assert np.all(var >= 0.0)
        assert np.all(var <= np.array([h.signal_variance for h in model.hyper]) + 1e-12)

    def test_query_dimension_checked(self, rng):
        with pytest.raises(InvalidArgumentError):
            gp_posterior(random_model(rng), [0.0])

    def test_discrete_mode_carried(self):
        model = gp_fit(Dataset([[0.0, 1.0]], [[0.1]], DISCRETE), hyp(ls=(1, 1)))
        assert model.mode == DISCRETE


def fd_gradient(model, q, eps=1e-5):
    cols = []
    for j in range(q.size):
        e = np.zeros(q.size)
        e[j] = eps
        cols.append((gp_posterior(model, q + e)[0] - gp_posterior(model, q - e)[0]) / (2 * eps))
    return np.array(cols).T


class TestGradient:
    def test_zero_at_single_datum(self):
        model = gp_fit(Dataset([[0.4, -1.0]], [[2.0]]), hyp(ls=(1, 1)), center=False)
        np.testing.assert_allclose(gp_posterior_gradient(model, [0.4, -1.0]), 0.0, atol=1e-14)

    def test_matches_finite_differences(self, rng):
        for _ in range(100):
            model = random_model(rng, N=5, D=2, n=1)
            q = rng.normal(size=2)
            G, F = gp_posterior_gradient(model, q), fd_gradient(model, q)
            assert np.linalg.norm(G - F) <= 1e-4 * max(np.linalg.norm(F), 1e-8)

    def test_scales_with_targets(self, rng):
        X = rng.normal(size=(6, 2))
        y = rng.normal(size=6)
        h = hyp(1.0, (1.0, 1.0), 1e-3)
        q = rng.normal(size=2)
        g1 = gp_posterior_gradient(gp_fit(Dataset(X, y), h, center=False), q)
        g3 = gp_posterior_gradient(gp_fit(Dataset(X, 3.0 * y), h, center=False), q)
        np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-12)


class TestLikelihood:
    @pytest.mark.parametrize("f, expected", [(0.0, -0.5 * math.log(2 * math.pi)),
                                             (1.0, -0.5 - 0.5 * math.log(2 * math.pi))])
    def test_standard_normal(self, f, expected):
        model = gp_fit(Dataset([[0.0]], [[f]]), KernelHyperparameters(1.0 - 1e-12, [1.0], 1e-12), center=False)
        assert log_marginal_likelihood(model)[0] == pytest.approx(expected, abs=1e-9)

    def test_gradient_finite_differences(self, rng):
        for _ in range(10):
            model = random_model(rng, N=4, D=2, n=1, sn2=0.05)
            value, grad = log_marginal_likelihood(model)
            theta = model.hyper[0].to_log()
            fd = np.empty_like(theta)
            for j in range(theta.size):
                e = np.zeros_like(theta)
                e[j] = 1e-6
                vals = []
                for t in (theta + e, theta - e):
                    m = gp_fit(model.dataset, KernelHyperparameters.from_log(t), offsets=model.offsets)
                    vals.append(log_marginal_likelihood(m)[0])
                fd[j] = (vals[0] - vals[1]) / 2e-6
            assert np.linalg.norm(grad - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


class TestOptimize:
    def test_recovers_lengthscale(self):
        rng = np.random.default_rng(5)
        X = np.sort(rng.uniform(-5, 5, 100))[:, None]
        K = kernel_matrix(X, X, hyp(1.0, (1.0,), 1e-8)) + 1e-6 * np.eye(100)
        y = np.linalg.cholesky(K) @ rng.normal(size=100)
        h = optimize_hyperparameters(Dataset(X, y))[0]
        assert 0.5 <= h.lengthscales[0] <= 2.0

    def test_iters_zero_rejected(self):
        with pytest.raises(InvalidArgumentError):
            optimize_hyperparameters(Dataset([[0.0], [1.0]], [0.0, 1.0]), iters=0)

    def test_trace_monotone(self, rng):
        X = rng.uniform(-3, 3, (40, 2))
        y = np.column_stack([np.sin(X[:, 0]), X[:, 0] * X[:, 1]])
        _, traces = optimize_hyperparameters(Dataset(X, y), return_trace=True)
        for tr in traces:
            assert np.all(np.diff(tr) >= 0.0)

    def test_likelihood_not_worse_than_init(self, rng):
        X = rng.uniform(-3, 3, (30, 1))
        data = Dataset(X, np.cos(X[:, 0]))
        init = [hyp(1.0, (3.0,), 0.1)]
        before = log_marginal_likelihood(gp_fit(data, init))[0]
        after = log_marginal_likelihood(gp_fit(data, optimize_hyperparameters(data, init, iters=5)))[0]
        assert after >= before


class TestPersistence:
    def test_round_trip(self, rng, tmp_path):
        X = rng.uniform(-2, 2, (25, 3))
        model = train_gp(Dataset(X, np.column_stack([X[:, 0] ** 2, np.sin(X[:, 1])])), iters=20)
        save_model(model, tmp_path / "m.json", {"note": "x"})
        loaded, meta = load_model(tmp_path / "m.json")
        assert meta == {"note": "x"}
        q = rng.normal(size=(10, 3))
        np.testing.assert_allclose(predict(loaded, q)[0], predict(model, q)[0], atol=1e-9)

    def test_save_is_deterministic(self, rng, tmp_path):
        X = rng.uniform(-2, 2, (20, 2))
        data = Dataset(X, X[:, :1] ** 2)
        save_model(train_gp(data, iters=10, seed=3), tmp_path / "a.json")
        save_model(train_gp(data, iters=10, seed=3), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from residual_nmpc.errors import DataError, SingularKernelError
from residual_nmpc.gp.exact import (
    ExactGpModel,
    GpDataset,
    fit,
    lml_and_gradient,
    log_marginal_likelihood,
    optimize_hyperparams,
    predict,
)
from residual_nmpc.gp.kernels import KernelHyperparams, se_gram, se_kernel


def brute_lml(X, y, hyp):
    K = se_gram(X, X, hyp) + hyp.sigma_n**2 * np.eye(len(y))
    _, logdet = np.linalg.slogdet(K)
    return -0.5 * y @ np.linalg.solve(K, y) - 0.5 * logdet - 0.5 * len(y) * np.log(2 * np.pi)


def synthetic(rng, n=200, hyp=KernelHyperparams(1.0, 0.5, 0.1)):
    X = np.sort(rng.uniform(-3, 3, n))
    K = se_gram(X, X, hyp) + 1e-10 * np.eye(n)
    f = np.linalg.cholesky(K) @ rng.normal(size=n)
    return X, f + hyp.sigma_n * rng.normal(size=n)


class TestKernel:
    def test_zero_distance(self):
        assert se_kernel(0.3, 0.3, KernelHyperparams(1.0, 0.7, 0.1)) == 1.0

    def test_unit_distance(self):
        assert se_kernel(0.0, 1.0, KernelHyperparams(1.0, 1.0, 0.1)) == pytest.approx(np.exp(-0.5), abs=1e-15)

    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 5), st.floats(0.1, 5))
    def test_symmetric(self, a, b, sf, ell):
        h = KernelHyperparams(sf, ell, 0.1)
        assert se_kernel(a, b, h) == se_kernel(b, a, h)

    def test_no_noise_in_cross_covariance(self):
        h = KernelHyperparams(1.0, 1.0, 0.5)
        np.testing.assert_allclose(np.diag(se_gram([0.0, 1.0], [0.0, 1.0], h)), 1.0)

    def test_gram_psd(self, rng):
        X = rng.uniform(-2, 2, 40)
        K = se_gram(X, X, KernelHyperparams(1.3, 0.4, 0.1))
        np.testing.assert_allclose(K, K.T)
        assert np.min(np.linalg.eigvalsh(K + 0.01 * np.eye(40))) > 0


class TestFitPredict:
    def test_single_centered_point(self):
        m = fit(GpDataset.from_raw([0.0], [0.0]), KernelHyperparams(1.0, 1.0, 0.1))
        mean, _ = predict(m, [50.0, -80.0])
        np.testing.assert_allclose(mean, 0.0, atol=1e-15)

    def test_interpolates(self):
        X = np.array([-1.0, 0.2, 1.5])
        y = np.array([0.3, -0.8, 1.1])
        m = fit(GpDataset.from_raw(X, y), KernelHyperparams(1.0, 0.8, 1e-6))
        mean, _ = predict(m, X)
        np.testing.assert_allclose(mean, y, atol=1e-4)

    def test_hand_solved_mean(self):
        # posterior mean at a training input against an explicit 3x3 solve
        X = np.array([0.0, 1.0, 2.0])
        y = np.array([1.0, -1.0, 0.5])
        h = KernelHyperparams(1.0, 1.0, 0.01)
        K = np.exp(-0.5 * (X[:, None] - X[None, :]) ** 2)
        ymu = y.mean()
        w = np.linalg.solve(K + 1e-4 * np.eye(3), y - ymu)
        expect = K[1] @ w + ymu
        mean, _ = predict(fit(GpDataset.from_raw(X, y), h), [1.0])
        assert mean[0] == pytest.approx(expect, abs=1e-10)
        assert mean[0] == pytest.approx(-1.0, abs=1e-3)

    def test_duplicates_without_noise(self):
        with pytest.raises(SingularKernelError):
            fit(GpDataset.from_raw([0.0, 0.0, 1.0], [1.0, 2.0, 0.0]), KernelHyperparams(1.0, 1.0, 0.0))

    def test_prior_reversion(self, rng):
        X, y = synthetic(rng, 30)
        h = KernelHyperparams(1.2, 0.5, 0.1)
        m = fit(GpDataset.from_raw(X, y), h)
        mean, var = predict(m, [3 + 10 * 0.5 + 1, -3 - 10 * 0.5 - 1])
        np.testing.assert_allclose(mean, y.mean(), atol=1e-9)
        np.testing.assert_allclose(var, h.sigma_f**2, rtol=1e-2)

    def test_variance_contracts(self, rng):
        X, y = synthetic(rng, 40)
        h = KernelHyperparams(0.9, 0.5, 0.1)
        _, var = predict(fit(GpDataset.from_raw(X, y), h), np.linspace(-5, 5, 300))
        assert np.all(var >= 0)
        assert np.all(var <= h.sigma_f**2 + 1e-12)

    def test_mean_linear_in_targets(self, rng):
        X, y = synthetic(rng, 25)
        h = KernelHyperparams(1.0, 0.5, 0.1)
        xs = np.linspace(-3, 3, 17)
        m1, v1 = predict(fit(GpDataset.from_raw(X, y), h), xs)
        m2, v2 = predict(fit(GpDataset.from_raw(X, 2 * y), h), xs)
        np.testing.assert_allclose(m2, 2 * m1, atol=1e-10)
        np.testing.assert_allclose(v2, v1, atol=1e-14)

    def test_serialization_roundtrip(self, rng):
        X, y = synthetic(rng, 15)
        m = fit(GpDataset.from_raw(X, y), KernelHyperparams(1.0, 0.5, 0.1))
        m2 = ExactGpModel.from_dict(m.to_dict())
        xs = np.linspace(-3, 3, 11)
        np.testing.assert_array_equal(predict(m, xs)[0], predict(m2, xs)[0])

    def test_rejects_bad_data(self):
        with pytest.raises(DataError):
            GpDataset.from_raw([0.0, np.nan], [1.0, 2.0])
        with pytest.raises(DataError):
            GpDataset.from_raw([0.0, 1.0], [1.0])


class TestLml:
    def test_scalar_closed_form(self):
        m = fit(GpDataset.from_raw([0.0], [0.0]), KernelHyperparams(1.0, 1.0, 1.0))
        assert log_marginal_likelihood(m) == pytest.approx(-0.5 * np.log(2) - 0.5 * np.log(2 * np.pi), abs=1e-14)

    def test_brute_force(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 21))
            X = rng.uniform(-2, 2, n)
            y = rng.normal(size=n)
            h = KernelHyperparams(*rng.uniform(0.3, 2.0, 2), rng.uniform(0.05, 0.5))
            data = GpDataset.from_raw(X, y)
            assert log_marginal_likelihood(fit(data, h)) == pytest.approx(brute_lml(data.X, data.y, h), abs=1e-8)

    def test_noise_inflation_lowers(self, rng):
        X, y = synthetic(rng, 60)
        data = GpDataset.from_raw(X, y)
        good = log_marginal_likelihood(fit(data, KernelHyperparams(1.0, 0.5, 0.1)))
        bad = log_marginal_likelihood(fit(data, KernelHyperparams(1.0, 0.5, 1.0)))
        assert bad < good

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 30))
        data = GpDataset.from_raw(rng.uniform(-2, 2, n), rng.normal(size=n))
        theta = np.log([rng.uniform(0.5, 2), rng.uniform(0.3, 1.5), rng.uniform(0.1, 0.6)])
        _, g = lml_and_gradient(data, theta)
        fd = central_diff(lambda t: lml_and_gradient(data, t)[0], theta, h=1e-5)
        assert rel_err(g, fd) < 1e-4


class TestOptimize:
    def test_recovers_length_scale(self, rng):
        X, y = synthetic(rng, 200)
        h = optimize_hyperparams(GpDataset.from_raw(X, y), KernelHyperparams(1.0, 1.0, 0.3))
        assert 0.35 <= h.length_scale <= 0.65

    def test_fixed_point(self, rng):
        X, y = synthetic(rng, 80)
        data = GpDataset.from_raw(X, y)
        h = optimize_hyperparams(data, KernelHyperparams(1.0, 1.0, 0.3), gtol=1e-9)
        _, g = lml_and_gradient(data, h.log_params)
        h2 = optimize_hyperparams(data, h, gtol=max(2 * np.max(np.abs(g)), 1e-12))
        assert h2 == h

    def test_needs_three_points(self):
        with pytest.raises(DataError):
            optimize_hyperparams(GpDataset.from_raw([0.0, 1.0], [0.0, 1.0]), KernelHyperparams())

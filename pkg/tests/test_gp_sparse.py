from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err, spread_inducing
from residual_nmpc.dynamics import PlantConfig, plant_step
from residual_nmpc.errors import DataError, SingularKernelError
from residual_nmpc.gp.exact import GpDataset, fit, log_marginal_likelihood, optimize_hyperparams, predict
from residual_nmpc.gp.kernels import KernelHyperparams
from residual_nmpc.gp.sparse import (
    SgpModel,
    SgpModelSet,
    compute_variational_params,
    elbo,
    elbo_and_gradient,
    select_inducing_points,
    sgp_predict,
    train_sgp,
)

H = KernelHyperparams(1.0, 0.6, 0.2)


def random_data(rng, n):
    X = rng.uniform(-2, 2, n)
    y = np.sin(2 * X) + 0.2 * rng.normal(size=n)
    return GpDataset.from_raw(X, y)


def drag_residuals(rng, n, plant=PlantConfig(tau=0.1, c_d=1.0), dt=0.1):
    """Residual rates along a random walk of x-velocity commands."""
    x, v = np.zeros(4), np.zeros(3)
    c = 0.0
    V, Y = [], []
    for _ in range(n):
        c = float(np.clip(c + rng.normal(0, 0.4), -1.5, 1.5))
        x, v = plant_step(plant, x, v, np.array([c, 0, 0, 0]), dt)
        V.append(c)
        Y.append((v[0] - c) / dt)
    return np.array(V), np.array(Y)


class TestElbo:
    def test_saturated_equals_exact(self, rng):
        data = random_data(rng, 50)
        assert elbo(data, H, data.X) == pytest.approx(log_marginal_likelihood(fit(data, H)), abs=1e-6)

    def test_far_single_point(self, rng):
        data = random_data(rng, 40)
        n = data.n
        sn2 = H.sigma_n**2
        expect = -0.5 * n * np.log(2 * np.pi * sn2) - 0.5 * data.y @ data.y / sn2 - 0.5 * n * H.sigma_f**2 / sn2
        val = elbo(data, H, [[100.0]])
        assert val == pytest.approx(expect, rel=1e-12)
        assert val < elbo(data, H, data.X)

    def test_gap_nonnegative(self, rng):
        for _ in range(20):
            data = random_data(rng, 50)
            z = rng.uniform(-2, 2, 10)
            assert log_marginal_likelihood(fit(data, H)) - elbo(data, H, z) >= -1e-8

    def test_nested_monotone(self, rng):
        data = random_data(rng, 80)
        Z = rng.uniform(-2.2, 2.2, 40)
        vals = [elbo(data, H, Z[:m]) for m in (1, 2, 5, 10, 20, 40)]
        assert np.all(np.diff(vals) >= -1e-8)

    def test_duplicate_inducing_named(self, rng):
        data = random_data(rng, 20)
        with pytest.raises(SingularKernelError, match="1 and 3"):
            elbo(data, H, [0.0, 0.5, 1.0, 0.5])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(10, 60))
        m = int(rng.integers(2, 8))
        data = random_data(rng, n)
        theta = np.log([rng.uniform(0.6, 1.5), rng.uniform(0.4, 1.2), rng.uniform(0.15, 0.5)])
        z = spread_inducing(rng, m, np.exp(theta[1]))
        _, gz, gth = elbo_and_gradient(data.X, data.y, z, theta)
        fz = central_diff(lambda q: elbo_and_gradient(data.X, data.y, q, theta)[0], z, h=1e-4)
        fth = central_diff(lambda t: elbo_and_gradient(data.X, data.y, z, t)[0], theta, h=1e-4)
        assert rel_err(gz[:, 0], fz) < 1e-4
        assert rel_err(gth, fth) < 1e-4


class TestVariational:
    def test_zero_targets(self, rng):
        X = rng.uniform(-2, 2, 30)
        z = np.linspace(-2, 2, 6)
        mu0, A0 = compute_variational_params(GpDataset.from_raw(X, np.zeros(30)), H, z)
        _, A1 = compute_variational_params(GpDataset.from_raw(X, rng.normal(size=30)), H, z)
        np.testing.assert_array_equal(mu0, 0.0)
        np.testing.assert_allclose(A0, A1, atol=1e-14)

    def test_linear_in_targets(self, rng):
        data = random_data(rng, 30)
        z = np.linspace(-2, 2, 6)
        mu, A = compute_variational_params(data, H, z)
        mu3, A3 = compute_variational_params(GpDataset(data.X, 3 * data.y), H, z)
        np.testing.assert_allclose(mu3, 3 * mu, atol=1e-12)
        np.testing.assert_allclose(A3, A, atol=1e-14)

    def test_covariance_psd(self, rng):
        data = random_data(rng, 60)
        _, A = compute_variational_params(data, H, np.linspace(-2, 2, 12))
        np.testing.assert_allclose(A, A.T)
        assert np.min(np.linalg.eigvalsh(A)) >= -1e-10

    def test_interpolates_at_saturation(self):
        X = np.array([-1.5, -0.3, 0.4, 1.2])
        y = np.array([0.2, -0.7, 0.9, 0.1])
        h = KernelHyperparams(1.0, 0.5, 1e-4)
        model = SgpModel.from_training(GpDataset.from_raw(X, y), h, X)
        np.testing.assert_allclose(sgp_predict(model, X)[0], y, atol=1e-3)


class TestPredict:
    def test_matches_exact_gp(self, rng):
        data = random_data(rng, 50)
        xs = np.linspace(-3, 3, 101)
        me, ve = predict(fit(data, H), xs)
        ms, vs = sgp_predict(SgpModel.from_training(data, H, data.X), xs)
        assert np.max(np.abs(ms - me)) <= 1e-6
        assert np.max(np.abs(vs - ve)) <= 1e-6

    def test_prior_reversion(self, rng):
        data = random_data(rng, 50)
        model = SgpModel.from_training(data, H, np.linspace(-2, 2, 8))
        mean, var = sgp_predict(model, [40.0])
        assert mean[0] == pytest.approx(data.y_mean, abs=1e-12)
        assert var[0] == pytest.approx(H.sigma_f**2, rel=1e-9)

    def test_variance_lower_at_inducing(self, rng):
        data = random_data(rng, 50)
        z = np.linspace(-2, 2, 8)
        model = SgpModel.from_training(data, H, z)
        _, v_in = sgp_predict(model, [z[3]])
        _, v_far = sgp_predict(model, [2.0 + 5 * H.length_scale])
        assert v_in[0] < v_far[0]

    def test_mean_gradient(self, rng):
        data = random_data(rng, 50)
        model = SgpModel.from_training(data, H, np.linspace(-2, 2, 8))
        x = np.linspace(-2.5, 2.5, 9)
        mean, grad = model.mean_1d(x)
        np.testing.assert_allclose(mean, sgp_predict(model, x)[0], atol=1e-12)
        fd = np.array([(model.mean_1d(np.array([a + 1e-6]))[0] - model.mean_1d(np.array([a - 1e-6]))[0])[0] / 2e-6 for a in x])
        assert rel_err(grad, fd) < 1e-6

    def test_model_set_roundtrip(self, rng):
        axes = tuple(SgpModel.from_training(random_data(rng, 30), H, np.linspace(-2, 2, 5), 0.1) for _ in range(3))
        ms = SgpModelSet(axes, 0.1, frozenset({"abc"}))
        back = SgpModelSet.from_dict(ms.to_dict())
        v = rng.uniform(-2, 2, (7, 3))
        np.testing.assert_array_equal(ms.mean(v), back.mean(v))
        np.testing.assert_array_equal(ms.variance(v), back.variance(v))
        assert back.training_hashes == {"abc"}

    def test_zero_set(self, rng):
        z = SgpModelSet.zero(0.1)
        g, dg = z.mean_and_gradient(rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(g, 0.0)
        np.testing.assert_array_equal(dg, 0.0)


class TestInducingSelection:
    def test_uniform(self, rng):
        data = GpDataset.from_raw(rng.uniform(-2, 2, 1000), np.zeros(1000))
        m = 10
        z = np.sort(select_inducing_points(data, m)[:, 0])
        gaps = np.diff(np.concatenate([[-2.0], z, [2.0]]))
        assert np.max(gaps) < 3 * 4.0 / m

    def test_low_velocity_bias(self, rng):
        data = GpDataset.from_raw(rng.uniform(-2, 2, 1000), np.zeros(1000))
        z = select_inducing_points(data, 10, bias=0.5)[:, 0]
        assert np.mean(np.abs(z) <= 1.0) >= 0.6

    def test_saturation(self, rng):
        X = rng.uniform(-2, 2, 12)
        z = select_inducing_points(GpDataset.from_raw(X, np.zeros(12)), 12)
        np.testing.assert_array_equal(np.sort(z[:, 0]), np.sort(X))

    def test_distinct(self, rng):
        X = np.repeat(rng.uniform(-2, 2, 15), 4)
        z = select_inducing_points(GpDataset.from_raw(X, np.zeros(60)), 14)
        assert len(np.unique(z[:, 0])) == 14

    def test_too_many(self):
        data = GpDataset.from_raw([0.0, 0.0, 1.0], [0.0, 0.0, 0.0])
        with pytest.raises(DataError):
            select_inducing_points(data, 3)


class TestTraining:
    def test_trace_monotone(self, rng):
        data = random_data(rng, 150)
        _, rep = train_sgp(data, 10, 0.0, KernelHyperparams(1.0, 1.0, 0.3))
        assert rep.iterations >= 1
        assert np.all(np.diff(rep.trace) >= -1e-9)
        assert rep.gap >= -1e-8

    def test_saturated_bound_tight(self, rng):
        data = random_data(rng, 25)
        _, rep = train_sgp(data, 25, 0.0, KernelHyperparams(1.0, 1.0, 0.3))
        assert rep.exact_lml - rep.elbo == pytest.approx(0.0, abs=1e-6)

    def test_drag_accuracy_vs_exact(self, rng):
        V, Y = drag_residuals(rng, 700)
        tr, te = slice(0, 500), slice(500, 700)
        data = GpDataset.from_raw(V[tr], Y[tr])
        hyp0 = KernelHyperparams(1.0, 1.0, 0.3)
        exact = fit(data, optimize_hyperparams(data, hyp0))
        sgp, _ = train_sgp(data, 30, 0.0, hyp0)
        rmse_exact = np.sqrt(np.mean((predict(exact, V[te])[0] - Y[te]) ** 2))
        rmse_sgp = np.sqrt(np.mean((sgp_predict(sgp, V[te])[0] - Y[te]) ** 2))
        assert rmse_sgp <= 1.3 * rmse_exact

    def test_deterministic(self, rng):
        data = random_data(rng, 100)
        a, _ = train_sgp(data, 8, 0.5, KernelHyperparams(1.0, 1.0, 0.3), seed=3)
        b, _ = train_sgp(data, 8, 0.5, KernelHyperparams(1.0, 1.0, 0.3), seed=3)
        assert a.to_dict() == b.to_dict()

    def test_m_exceeds_n(self, rng):
        with pytest.raises(DataError):
            train_sgp(random_data(rng, 5), 6, 0.0, KernelHyperparams())

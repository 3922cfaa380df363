from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from conftest import ConstantResidual, QuadraticResidual, central_diff, rel_err
from residual_nmpc.dynamics import (
    DEFAULT_SELECTOR,
    PlantConfig,
    State,
    f_est,
    f_norm,
    plant_step,
    rk4_step,
    rk4_with_jacobians,
    wrap_angle,
)
from residual_nmpc.errors import DomainError
from residual_nmpc.gp.sparse import SgpModelSet

finite = st.floats(-10, 10, allow_nan=False)


def yaw_coupled_error(dt, T=1.0):
    """Global RK4 error for omega=1, v=(1,0,0); exact path is a unit circle arc."""
    x = np.zeros(4)
    u = np.array([1.0, 0.0, 0.0, 1.0])
    for _ in range(int(round(T / dt))):
        x = rk4_step(f_norm, x, u, dt)
    exact = np.array([np.sin(T), 1.0 - np.cos(T), 0.0, T])
    return np.linalg.norm(x - exact)


class TestFNorm:
    def test_identity_rotation(self):
        np.testing.assert_allclose(f_norm([0, 0, 0, 0], [1, 0, 0, 0]), [1, 0, 0, 0], atol=1e-15)

    def test_quarter_turn(self):
        np.testing.assert_allclose(f_norm([0, 0, 0, np.pi / 2], [1, 0, 0, 0]), [0, 1, 0, 0], atol=1e-15)

    def test_eighth_turn(self):
        out = f_norm([0, 0, 0, np.pi / 4], [1, 1, 0, 0.2])
        np.testing.assert_allclose(out, [0, np.sqrt(2), 0, 0.2], atol=1e-15)

    def test_rejects_nan(self):
        with pytest.raises(DomainError):
            f_norm([0, 0, np.nan, 0], [1, 0, 0, 0])
        with pytest.raises(DomainError):
            f_norm([0, 0, 0, 0], [np.inf, 0, 0, 0])

    @given(alpha=finite, v=st.tuples(finite, finite, finite), a=finite)
    def test_linear_in_velocity(self, alpha, v, a):
        x = np.array([0.3, -1.0, 2.0, alpha])
        u = np.array([*v, 0.4])
        ua = np.array([*(a * np.array(v)), 0.4])
        np.testing.assert_allclose(f_norm(x, ua)[:3], a * f_norm(x, u)[:3], atol=1e-9)


class TestFEst:
    def test_zero_residual(self):
        x, u = np.array([1, 2, 3, 0.7]), np.array([0.5, -0.2, 0.1, 0.3])
        np.testing.assert_array_equal(f_est(x, u, ConstantResidual([0, 0, 0])), f_norm(x, u))

    def test_hand_example(self):
        out = f_est([0, 0, 0, 0], [1, 0, 0, 0], ConstantResidual([-0.5, 0, 0]), delta_v=0.1)
        np.testing.assert_allclose(out, [0.95, 0, 0, 0], atol=1e-15)

    def test_zero_selector(self):
        x, u = np.array([1, 2, 3, -2.0]), np.array([0.5, -0.2, 0.1, 0.3])
        out = f_est(x, u, ConstantResidual([3.0, -1.0, 2.0]), B_z=np.zeros((4, 3)))
        np.testing.assert_array_equal(out, f_norm(x, u))

    def test_untrained_model(self):
        with pytest.raises(DomainError):
            f_est([0, 0, 0, 0], [1, 0, 0, 0], None)

    def test_selector_shape(self):
        assert DEFAULT_SELECTOR.shape == (4, 3)
        assert set(np.unique(DEFAULT_SELECTOR)) <= {0.0, 1.0}
        np.testing.assert_array_equal(DEFAULT_SELECTOR.sum(axis=0), [1, 1, 1])


class TestRk4:
    def test_constant_velocity(self):
        out = rk4_step(f_norm, np.zeros(4), np.array([1.0, 0, 0, 0]), 0.1)
        np.testing.assert_array_equal(out, [0.1, 0, 0, 0])

    def test_pure_rotation(self):
        out = rk4_step(f_norm, np.zeros(4), np.array([0, 0, 0, 1.0]), 0.1)
        np.testing.assert_allclose(out, [0, 0, 0, 0.1], atol=1e-15)

    def test_fourth_order(self):
        e = [yaw_coupled_error(dt) for dt in (0.1, 0.05, 0.025)]
        for a, b in zip(e, e[1:]):
            assert 12.0 <= a / b <= 20.0

    def test_yaw_wrapped(self):
        out = rk4_step(f_norm, np.array([0, 0, 0, 3.1]), np.array([0, 0, 0, 1.0]), 0.1)
        assert -np.pi < out[3] <= np.pi
        assert out[3] == pytest.approx(wrap_angle(3.2))

    def test_bad_dt(self):
        with pytest.raises(DomainError):
            rk4_step(f_norm, np.zeros(4), np.zeros(4), 0.0)

    def test_zero_model_bit_identical(self, rng):
        zero = SgpModelSet.zero(0.1)
        for _ in range(20):
            x = rng.normal(size=4)
            u = rng.normal(size=4)
            a = rk4_step(lambda x, u: f_est(x, u, zero), x, u, 0.1)
            b = rk4_step(f_norm, x, u, 0.1)
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("model", [None, QuadraticResidual()])
    def test_sensitivities(self, rng, model):
        for _ in range(5):
            x = rng.normal(size=(1, 4))
            u = rng.normal(size=(1, 4))
            _, A, B = rk4_with_jacobians(x, u, 0.1, model)
            Ax = central_diff(lambda z: rk4_with_jacobians(z[None], u, 0.1, model)[0][0], x[0])
            Bu = central_diff(lambda z: rk4_with_jacobians(x, z[None], 0.1, model)[0][0], u[0])
            assert rel_err(A[0], Ax) < 1e-6
            assert rel_err(B[0], Bu) < 1e-6

    def test_jacobian_step_matches_rk4(self, rng):
        model = QuadraticResidual()
        x, u = rng.normal(size=4), rng.normal(size=4)
        a = rk4_with_jacobians(x[None], u[None], 0.1, model)[0][0]
        b = rk4_step(lambda x, u: f_est(x, u, model), x, u, 0.1)
        np.testing.assert_allclose(wrap_angle(a[3]), b[3], atol=1e-12)
        np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)


class TestPlant:
    def test_fast_lag_converges(self):
        plant = PlantConfig(tau=0.01, c_d=0.0, dt_sim=0.01)
        x, v = np.zeros(4), np.zeros(3)
        u = np.array([1.0, -0.5, 0.3, 0.0])
        for _ in range(5):
            x, v = plant_step(plant, x, v, u, 0.1)
        np.testing.assert_allclose(v, u[:3], rtol=1e-2)

    def test_static_equilibrium(self):
        x0 = np.array([1.0, 2.0, 3.0, 0.5])
        x, v = plant_step(PlantConfig(), x0, np.zeros(3), np.zeros(4), 0.1)
        np.testing.assert_array_equal(x, x0)
        np.testing.assert_array_equal(v, 0.0)

    def test_drag_steady_state(self):
        v_ss = brentq(lambda v: (1 - v) / 0.3 - 0.1 * v * v, 0.0, 1.0)
        plant = PlantConfig(tau=0.3, c_d=0.1, dt_sim=0.01)
        x, v = np.zeros(4), np.zeros(3)
        u = np.array([1.0, 0, 0, 0])
        for _ in range(10):
            x, v = plant_step(plant, x, v, u, 0.1)
        # after 1 s the lag has decayed by about exp(-3.5)
        assert v[0] == pytest.approx(v_ss, rel=0.05)
        for _ in range(90):
            x, v = plant_step(plant, x, v, u, 0.1)
        # semi-implicit Euler shifts the fixed point only through round-off
        assert v[0] == pytest.approx(v_ss, abs=1e-9)

    def test_yaw_follows_exactly(self):
        x, v = plant_step(PlantConfig(), np.zeros(4), np.zeros(3), np.array([0, 0, 0, 0.7]), 0.1)
        assert x[3] == pytest.approx(0.07, abs=1e-15)

    def test_dt_not_multiple(self):
        with pytest.raises(DomainError):
            plant_step(PlantConfig(dt_sim=0.03), np.zeros(4), np.zeros(3), np.zeros(4), 0.1)

    def test_deterministic(self, rng):
        U = rng.uniform(-1, 1, size=(30, 4))

        def run():
            x, v = np.zeros(4), np.zeros(3)
            out = []
            for u in U:
                x, v = plant_step(PlantConfig(), x, v, u, 0.1)
                out.append(np.concatenate([x, v]))
            return np.array(out)

        np.testing.assert_array_equal(run(), run())

    def test_invalid_config(self):
        with pytest.raises(DomainError):
            PlantConfig(tau=0.0)
        with pytest.raises(DomainError):
            PlantConfig(c_d=-1.0)


def test_state_invariants():
    s = State.from_array([0, 0, 0, 3 * np.pi])
    assert -np.pi < s.alpha <= np.pi
    with pytest.raises(DomainError):
        State.from_array([np.nan, 0, 0, 0])


@settings(max_examples=200)
@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert np.cos(w) == pytest.approx(np.cos(a), abs=1e-9)

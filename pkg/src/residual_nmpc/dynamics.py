"""4-DOF kinematic quadrotor model, residual augmentation and the synthetic plant.

States are ``[px, py, pz, yaw]`` and controls ``[vx, vy, vz, yaw_rate]`` with the
linear velocity expressed in the yaw-aligned body frame. Array functions accept
any leading batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from residual_nmpc.errors import DomainError

STATE_DIM = 4
CONTROL_DIM = 4
RESIDUAL_DIM = 3

#: Maps the three velocity residuals onto the position-derivative rows.
DEFAULT_SELECTOR = np.vstack([np.eye(3), np.zeros((1, 3))])


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


@dataclass(frozen=True)
class State:
    p: tuple[float, float, float]
    alpha: float

    def __post_init__(self):
        p = tuple(float(c) for c in self.p)
        if len(p) != 3 or not np.all(np.isfinite(p)) or not np.isfinite(self.alpha):
            raise DomainError(f"state must be finite with 3 position components, got p={self.p}, alpha={self.alpha}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "alpha", float(wrap_angle(self.alpha)))

    def as_array(self) -> NDArray[np.float64]:
        return np.array([*self.p, self.alpha])

    @classmethod
    def from_array(cls, x: ArrayLike) -> State:
        x = np.asarray(x, dtype=float)
        return cls(p=tuple(x[:3]), alpha=float(x[3]))


@dataclass(frozen=True)
class ControlInput:
    v: tuple[float, float, float]
    omega: float

    def __post_init__(self):
        v = tuple(float(c) for c in self.v)
        if len(v) != 3 or not np.all(np.isfinite(v)) or not np.isfinite(self.omega):
            raise DomainError(f"control must be finite with 3 velocity components, got v={self.v}, omega={self.omega}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "omega", float(self.omega))

    def as_array(self) -> NDArray[np.float64]:
        return np.array([*self.v, self.omega])

    def within(self, v_max: float, omega_max: float) -> bool:
        return max(abs(c) for c in self.v) <= v_max and abs(self.omega) <= omega_max

    @classmethod
    def from_array(cls, u: ArrayLike) -> ControlInput:
        u = np.asarray(u, dtype=float)
        return cls(v=tuple(u[:3]), omega=float(u[3]))


@dataclass(frozen=True)
class PlantConfig:
    """First-order velocity lag with per-axis quadratic drag.

    Attributes
    ----------
    tau : velocity lag time constant [s].
    c_d : quadratic drag coefficient [1/m], applied component-wise.
    dt_sim : inner integration step [s].
    """

    tau: float = 0.1
    c_d: float = 1.0
    dt_sim: float = 0.01

    def __post_init__(self):
        if not (self.tau > 0 and self.c_d >= 0 and self.dt_sim > 0):
            raise DomainError(f"invalid plant config {self}")

    @classmethod
    def matched(cls, dt_sim: float = 0.01) -> PlantConfig:
        """Plant that reproduces the nominal model (lag collapses in one substep)."""
        return cls(tau=dt_sim, c_d=0.0, dt_sim=dt_sim)


class ResidualModel(Protocol):
    """Anything that predicts the per-axis residual rate from world-frame velocity."""

    delta_v: float

    def mean(self, v: NDArray) -> NDArray: ...

    def mean_and_gradient(self, v: NDArray) -> tuple[NDArray, NDArray]: ...


def _as_array(x, dim: int, what: str) -> NDArray[np.float64]:
    if isinstance(x, (State, ControlInput)):
        return x.as_array()
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1:] != (dim,):
        raise DomainError(f"{what} must have trailing dimension {dim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains non-finite values")
    return arr


def yaw_rotation(alpha) -> NDArray[np.float64]:
    """Rotation about z by ``alpha``; shape ``alpha.shape + (3, 3)``."""
    alpha = np.asarray(alpha, dtype=float)
    c, s = np.cos(alpha), np.sin(alpha)
    R = np.zeros(alpha.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R


def body_to_world(alpha, v) -> NDArray[np.float64]:
    """Rotate body-frame velocity commands into the world frame."""
    alpha = np.asarray(alpha, dtype=float)
    v = np.asarray(v, dtype=float)
    c, s = np.cos(alpha), np.sin(alpha)
    out = np.empty(np.broadcast_shapes(alpha.shape + (3,), v.shape))
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    out[..., 2] = v[..., 2]
    return out


def f_norm(x, u) -> NDArray[np.float64]:
    """Nominal kinematics: ``p' = R_yaw(alpha) v``, ``alpha' = omega``."""
    x = _as_array(x, STATE_DIM, "state")
    u = _as_array(u, CONTROL_DIM, "control")
    out = np.empty(np.broadcast_shapes(x.shape, u.shape))
    out[..., :3] = body_to_world(x[..., 3], u[..., :3])
    out[..., 3] = u[..., 3]
    return out


def f_est(x, u, model: ResidualModel | None, B_z: NDArray | None = None, delta_v: float | None = None):
    """Nominal kinematics plus the selector-mapped residual correction.

    The model predicts a residual *rate* (velocity gap divided by the sampling
    interval). Multiplying by ``delta_v`` turns it back into a velocity
    correction that lands on the position rows.
    """
    if model is None or not hasattr(model, "mean"):
        raise DomainError("f_est needs a trained residual model")
    x = _as_array(x, STATE_DIM, "state")
    u = _as_array(u, CONTROL_DIM, "control")
    B_z = DEFAULT_SELECTOR if B_z is None else np.asarray(B_z, dtype=float)
    delta_v = model.delta_v if delta_v is None else float(delta_v)
    if not delta_v > 0:
        raise DomainError(f"delta_v must be positive, got {delta_v}")
    v_world = body_to_world(x[..., 3], u[..., :3])
    correction = model.mean(v_world) * delta_v
    return f_norm(x, u) + correction @ B_z.T


def rk4_step(f: Callable, x, u, dt: float) -> NDArray[np.float64]:
    """Classical RK4 with ``u`` held over the step; yaw is re-wrapped."""
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    x = _as_array(x, STATE_DIM, "state")
    u = _as_array(u, CONTROL_DIM, "control")
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    out = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., 3] = wrap_angle(out[..., 3])
    return out


def dynamics_and_jacobians(x, u, model: ResidualModel | None = None, B_z: NDArray | None = None):
    """Continuous dynamics with analytic Jacobians, batched over the leading axis.

    Returns ``(f, A, B)`` with ``A = df/dx`` and ``B = df/du``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = x.shape[0]
    alpha = x[:, 3]
    c, s = np.cos(alpha), np.sin(alpha)
    v = u[:, :3]
    f = np.empty((n, STATE_DIM))
    f[:, 0] = c * v[:, 0] - s * v[:, 1]
    f[:, 1] = s * v[:, 0] + c * v[:, 1]
    f[:, 2] = v[:, 2]
    f[:, 3] = u[:, 3]
    # d(R v)/d alpha
    dRv = np.zeros((n, 3))
    dRv[:, 0] = -s * v[:, 0] - c * v[:, 1]
    dRv[:, 1] = c * v[:, 0] - s * v[:, 1]
    R = yaw_rotation(alpha)

    A = np.zeros((n, STATE_DIM, STATE_DIM))
    A[:, :3, 3] = dRv
    B = np.zeros((n, STATE_DIM, CONTROL_DIM))
    B[:, :3, :3] = R
    B[:, 3, 3] = 1.0

    if model is not None:
        B_z = DEFAULT_SELECTOR if B_z is None else np.asarray(B_z, dtype=float)
        v_world = f[:, :3]
        g, dg = model.mean_and_gradient(v_world)
        dv = model.delta_v
        f += (g * dv) @ B_z.T
        # residual axis j depends only on world velocity component j
        dcorr_dalpha = dg * dRv * dv
        dcorr_dv = (dg * dv)[:, :, None] * R
        A[:, :, 3] += dcorr_dalpha @ B_z.T
        B[:, :, :3] += np.einsum("ij,njk->nik", B_z, dcorr_dv)
    return f, A, B


def rk4_with_jacobians(x, u, dt: float, model: ResidualModel | None = None, B_z: NDArray | None = None):
    """Batched RK4 step and its sensitivities ``(x_next, dx_next/dx, dx_next/du)``.

    Yaw is not wrapped here so the map stays smooth; callers wrap differences.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = x.shape[0]
    eye = np.broadcast_to(np.eye(STATE_DIM), (n, STATE_DIM, STATE_DIM))
    h = dt

    k1, A1, B1 = dynamics_and_jacobians(x, u, model, B_z)
    dk1x, dk1u = A1, B1
    x2 = x + 0.5 * h * k1
    k2, A2, B2 = dynamics_and_jacobians(x2, u, model, B_z)
    dk2x = A2 @ (eye + 0.5 * h * dk1x)
    dk2u = A2 @ (0.5 * h * dk1u) + B2
    x3 = x + 0.5 * h * k2
    k3, A3, B3 = dynamics_and_jacobians(x3, u, model, B_z)
    dk3x = A3 @ (eye + 0.5 * h * dk2x)
    dk3u = A3 @ (0.5 * h * dk2u) + B3
    x4 = x + h * k3
    k4, A4, B4 = dynamics_and_jacobians(x4, u, model, B_z)
    dk4x = A4 @ (eye + h * dk3x)
    dk4u = A4 @ (h * dk3u) + B4

    x_next = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    Ad = eye + h / 6.0 * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    Bd = h / 6.0 * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return x_next, Ad, Bd


def plant_step(plant: PlantConfig, x_true, v_true, u_cmd, dt: float):
    """Advance the synthetic plant by ``dt``.

    The world-frame velocity relaxes toward the rotated command through a
    first-order lag and is slowed by component-wise quadratic drag; yaw follows
    the commanded rate exactly. Integration uses semi-implicit Euler substeps.

    Returns
    -------
    (x_next, v_next) : next state ``[p, yaw]`` and world-frame velocity.
    """
    x = _as_array(x_true, STATE_DIM, "plant state").copy()
    v = _as_array(v_true, 3, "plant velocity").copy()
    u = _as_array(u_cmd, CONTROL_DIM, "command")
    n_sub = int(round(dt / plant.dt_sim))
    if n_sub < 1 or abs(n_sub * plant.dt_sim - dt) > 1e-9 * max(1.0, dt):
        raise DomainError(f"dt={dt} is not a multiple of dt_sim={plant.dt_sim}")
    h = plant.dt_sim
    for _ in range(n_sub):
        # yaw, then velocity, then position: each update sees the newest values
        x[3] += h * u[3]
        target = body_to_world(x[3], u[:3])
        v = v + h * ((target - v) / plant.tau - plant.c_d * v * np.abs(v))
        x[:3] += h * v
    x[3] = wrap_angle(x[3])
    return x, v

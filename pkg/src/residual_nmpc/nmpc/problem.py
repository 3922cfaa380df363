"""Multiple-shooting transcription: cost, shooting defects, obstacle constraints.

The decision vector is laid out controls first, then states::

    w = [u_0, ..., u_{N-1}, x_0, ..., x_N]

with 4 entries per control and per state. Yaw is treated as a point on the
circle wherever two yaw values are differenced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from residual_nmpc.dynamics import CONTROL_DIM, STATE_DIM, ResidualModel, rk4_with_jacobians, wrap_angle
from residual_nmpc.errors import DomainError

#: added under the square root so the distance stays differentiable at zero
DIST_SMOOTHING = 1e-9


def split_w(w: NDArray, N: int) -> tuple[NDArray, NDArray]:
    """Views ``(U (N,4), X (N+1,4))`` into the decision vector."""
    w = np.asarray(w, dtype=float)
    nu = N * CONTROL_DIM
    if w.shape != (nu + (N + 1) * STATE_DIM,):
        raise DomainError(f"decision vector has shape {w.shape}, expected ({nu + (N + 1) * STATE_DIM},) for N={N}")
    return w[:nu].reshape(N, CONTROL_DIM), w[nu:].reshape(N + 1, STATE_DIM)


def join_w(U: NDArray, X: NDArray) -> NDArray:
    return np.concatenate([np.asarray(U, float).ravel(), np.asarray(X, float).ravel()])


@dataclass(frozen=True)
class RefSlice:
    """Reference over one horizon: ``N + 1`` states and ``N`` controls."""

    x_ref: NDArray[np.float64]
    u_ref: NDArray[np.float64]

    def __post_init__(self):
        x = np.asarray(self.x_ref, dtype=float)
        u = np.asarray(self.u_ref, dtype=float)
        if x.ndim != 2 or x.shape[1] != STATE_DIM or u.ndim != 2 or u.shape[1] != CONTROL_DIM:
            raise DomainError(f"reference slice needs (N+1,4) states and (N,4) controls, got {x.shape}, {u.shape}")
        if x.shape[0] != u.shape[0] + 1:
            raise DomainError(f"reference slice has {x.shape[0]} states for {u.shape[0]} controls")
        object.__setattr__(self, "x_ref", x)
        object.__setattr__(self, "u_ref", u)

    @property
    def N(self) -> int:
        return self.u_ref.shape[0]


def _state_error(X, x_ref):
    e = X - x_ref
    e[:, 3] = wrap_angle(e[:, 3])
    return e


def build_cost(ref: RefSlice, w, Q, R) -> tuple[float, NDArray]:
    """Tracking cost and its gradient w.r.t. ``w``.

    ``J = sum_i |x_i - x_ref_i|_Q^2 + sum_i |u_i - u_ref_i|_R^2`` with
    ``Q`` and ``R`` diagonal (given as 4-vectors).
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if Q.shape != (STATE_DIM,) or R.shape != (CONTROL_DIM,):
        raise DomainError(f"Q and R must be 4-vectors, got {Q.shape} and {R.shape}")
    U, X = split_w(w, ref.N)
    ex = _state_error(X, ref.x_ref)
    eu = U - ref.u_ref
    J = float(np.sum(ex * ex * Q) + np.sum(eu * eu * R))
    grad = join_w(2.0 * eu * R, 2.0 * ex * Q)
    return J, grad


def cost_hessian_diag(N: int, Q, R) -> NDArray:
    """Diagonal of the (constant) cost Hessian in ``w`` layout."""
    return join_w(np.tile(2.0 * np.asarray(R, float), (N, 1)), np.tile(2.0 * np.asarray(Q, float), (N + 1, 1)))


def shooting_defects(
    w,
    x_current,
    N: int,
    dt: float,
    model: ResidualModel | None = None,
    B_z: NDArray | None = None,
    with_jacobians: bool = False,
):
    """Defect vector ``g1`` (length ``4 (N + 1)``).

    Block 0 is ``x_current - x_0``; block ``i`` is ``f_d(x_{i-1}, u_{i-1}) - x_i``
    with ``f_d`` one RK4 step. Yaw entries are wrapped.

    With ``with_jacobians`` also returns the per-stage sensitivities
    ``(Ad, Bd)`` of shape ``(N, 4, 4)``; the Jacobian of ``g1`` is block
    bidiagonal in those (see :func:`defect_jacobian`).
    """
    U, X = split_w(w, N)
    x_current = np.asarray(x_current, dtype=float)
    x_next, Ad, Bd = rk4_with_jacobians(X[:-1], U, dt, model, B_z)
    g = np.empty((N + 1, STATE_DIM))
    g[0] = x_current - X[0]
    g[1:] = x_next - X[1:]
    g[:, 3] = wrap_angle(g[:, 3])
    if with_jacobians:
        return g.ravel(), Ad, Bd
    return g.ravel()


def defect_jacobian(Ad: NDArray, Bd: NDArray) -> NDArray:
    """Dense ``d g1 / d w`` assembled from the stage sensitivities."""
    N = Ad.shape[0]
    nu = N * CONTROL_DIM
    nx = (N + 1) * STATE_DIM
    Jg = np.zeros((nx, nu + nx))
    Jg[:STATE_DIM, nu : nu + STATE_DIM] = -np.eye(STATE_DIM)
    for i in range(N):
        r = (i + 1) * STATE_DIM
        Jg[r : r + STATE_DIM, i * CONTROL_DIM : (i + 1) * CONTROL_DIM] = Bd[i]
        Jg[r : r + STATE_DIM, nu + i * STATE_DIM : nu + (i + 1) * STATE_DIM] = Ad[i]
        Jg[r : r + STATE_DIM, nu + r : nu + r + STATE_DIM] = -np.eye(STATE_DIM)
    return Jg


def obstacle_constraints(w, N: int, centers, d_o: float, with_jacobian: bool = False):
    """Safe-distance constraints ``g2 <= 0`` for horizon states ``x_1..x_N``.

    Entry ``(j, i)`` (obstacle-major) is ``d_o - sqrt(|c_j - p_i|^2 + 1e-9)``.
    The pinned state ``x_0`` is excluded: it is the measured state and no
    decision can move it.

    With ``with_jacobian`` also returns ``d g2 / d p`` of shape ``(n_obs, N, 3)``.
    """
    _, X = split_w(w, N)
    C = np.asarray(centers, dtype=float).reshape(-1, 3)
    P = X[1:, :3]
    diff = P[None, :, :] - C[:, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2) + DIST_SMOOTHING)
    g = (d_o - dist).ravel()
    if with_jacobian:
        return g, -diff / dist[:, :, None]
    return g


def rollout(x0, U, dt: float, model: ResidualModel | None = None, B_z=None) -> NDArray:
    """States ``x_0..x_N`` from forward RK4 integration of ``U`` (yaw unwrapped)."""
    U = np.asarray(U, dtype=float)
    X = np.empty((U.shape[0] + 1, STATE_DIM))
    X[0] = x0
    for i in range(U.shape[0]):
        X[i + 1] = rk4_with_jacobians(X[i : i + 1], U[i : i + 1], dt, model, B_z)[0][0]
    return X

"""Reference trajectories from cubic uniform B-splines.

The waypoints are the spline's control points; the first and last are
tripled so the curve starts and ends exactly on them. Time is allocated by
arc length at a constant cruise speed, so the reference moves at
``min(v_max, natural peak speed)`` everywhere except the final partial step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import BSpline

from residual_nmpc.dynamics import CONTROL_DIM, STATE_DIM, ControlInput, State, wrap_angle, yaw_rotation
from residual_nmpc.errors import DataError, DomainError
from residual_nmpc.nmpc.problem import RefSlice

CSV_HEADER = ["t", "px", "py", "pz", "yaw", "vx", "vy", "vz", "omega"]
_ARC_SAMPLES_PER_SEGMENT = 400
DEFAULT_DECEL = 2.0  # m/s^2


@dataclass
class ReferenceTrajectory:
    """Uniformly sampled reference: ``x`` rows are states, ``u`` rows body-frame controls."""

    t: NDArray[np.float64]
    x: NDArray[np.float64]
    u: NDArray[np.float64]
    dt: float
    source_waypoints: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x = np.asarray(self.x, dtype=float).reshape(-1, STATE_DIM)
        self.u = np.asarray(self.u, dtype=float).reshape(-1, CONTROL_DIM)
        if not (len(self.t) == len(self.x) == len(self.u)) or len(self.t) < 1:
            raise DomainError("reference arrays must have equal non-zero length")
        if len(self.t) > 1 and np.max(np.abs(np.diff(self.t) - self.dt)) > 1e-9:
            raise DomainError("reference time grid is not uniform with spacing dt")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self) -> list[tuple[float, State, ControlInput]]:
        return [(float(t), State.from_array(x), ControlInput.from_array(u)) for t, x, u in zip(self.t, self.x, self.u)]

    @property
    def goal(self) -> NDArray:
        return self.x[-1, :3].copy()

    def world_velocity(self) -> NDArray:
        """World-frame reference velocity per sample."""
        return np.einsum("nij,nj->ni", yaw_rotation(self.x[:, 3]), self.u[:, :3])

    def slice(self, k: int, N: int) -> RefSlice:
        """Horizon reference starting at sample ``k``; held at the last sample past the end."""
        last = len(self) - 1
        ix = np.minimum(np.arange(k, k + N + 1), last)
        iu = np.arange(k, k + N)
        u = self.u[np.minimum(iu, last)].copy()
        u[iu >= last] = 0.0
        return RefSlice(self.x[ix].copy(), u)

    def nearest_index(self, p, start: int = 0) -> tuple[int, float]:
        """Closest sample at or after ``start`` and its distance."""
        start = min(max(int(start), 0), len(self) - 1)
        d = np.linalg.norm(self.x[start:, :3] - np.asarray(p, dtype=float)[None, :], axis=1)
        i = int(np.argmin(d))
        return start + i, float(d[i])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for t, x, u in zip(self.t, self.x, self.u):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])

    @classmethod
    def from_csv(cls, path) -> ReferenceTrajectory:
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}")
        try:
            arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric value ({exc})") from None
        if arr.shape[0] < 1 or arr.shape[1] != 9:
            raise DataError(f"{path}: expected at least one row of 9 columns")
        dt = float(arr[1, 0] - arr[0, 0]) if arr.shape[0] > 1 else 1.0
        return cls(t=arr[:, 0], x=arr[:, 1:5], u=arr[:, 5:9], dt=dt)


def _spline(waypoints: NDArray) -> BSpline:
    P = np.vstack([waypoints[:1], waypoints[:1], waypoints, waypoints[-1:], waypoints[-1:]])
    knots = np.arange(P.shape[0] + 4, dtype=float)
    return BSpline(knots, P, 3, extrapolate=False)


def generate_reference(
    waypoints,
    v_max: float,
    dt: float,
    initial_yaw: float = 0.0,
    decel: float = DEFAULT_DECEL,
) -> ReferenceTrajectory:
    """Sample a cruise-speed reference along the B-spline of ``waypoints``.

    The reference brakes at ``decel`` onto the last waypoint and stops there.

    Parameters
    ----------
    waypoints : (n, 3) array, n >= 4, no two consecutive points coincident
    v_max : cruise speed cap in m/s
    dt : sample spacing in s
    initial_yaw : yaw held while the path starts out vertical
    decel : deceleration in m/s^2 used to come to rest at the last waypoint

    Notes
    -----
    Yaw follows the horizontal direction of travel and is held where motion
    is vertical. Controls are expressed in the body frame, so an aligned yaw
    gives ``u.v = (|v_h|, 0, v_z)``.
    """
    W = np.asarray(waypoints, dtype=float)
    if W.ndim != 2 or W.shape[1] != 3:
        raise DomainError(f"waypoints must be an (n, 3) array, got shape {W.shape}")
    if W.shape[0] < 4:
        raise DomainError(f"a cubic B-spline needs at least 4 waypoints, got {W.shape[0]}")
    if not np.all(np.isfinite(W)):
        raise DomainError("waypoints must be finite")
    gaps = np.linalg.norm(np.diff(W, axis=0), axis=1)
    if np.any(gaps < 1e-9):
        i = int(np.argmin(gaps))
        raise DomainError(f"waypoints {i} and {i + 1} coincide")
    if not (v_max > 0 and dt > 0):
        raise DomainError(f"v_max and dt must be positive (got {v_max}, {dt})")

    spl = _spline(W)
    dspl = spl.derivative()
    u_lo, u_hi = 3.0, float(W.shape[0] + 4)
    uu = np.linspace(u_lo, u_hi, int(_ARC_SAMPLES_PER_SEGMENT * (u_hi - u_lo)) + 1)
    speed_u = np.linalg.norm(dspl(uu), axis=1)
    arc = cumulative_trapezoid(speed_u, uu, initial=0.0)
    length = float(arc[-1])
    speed = min(v_max, float(speed_u.max()))

    if not decel > 0:
        raise DomainError(f"decel must be positive, got {decel}")
    # cruise, then brake at constant deceleration onto the goal
    speed = min(speed, np.sqrt(decel * length))
    d_brake = 0.5 * speed**2 / decel
    t_cruise = (length - d_brake) / speed
    T = t_cruise + speed / decel
    tt = dt * np.arange(int(np.ceil(T / dt - 1e-9)) + 1)
    tb = np.clip(tt - t_cruise, 0.0, speed / decel)
    s = np.minimum(speed * np.minimum(tt, t_cruise) + speed * tb - 0.5 * decel * tb**2, length)
    s[-1] = length
    K = len(s)
    u_par = np.interp(s, arc, uu)
    pos = spl(u_par)
    pos[0], pos[-1] = W[0], W[-1]

    # unit tangent; nudge inside the domain where the clamped ends have zero derivative
    tan = dspl(np.clip(u_par, u_lo + 1e-6, u_hi - 1e-6))
    tan /= np.maximum(np.linalg.norm(tan, axis=1, keepdims=True), 1e-300)
    # speed over the interval that starts at each sample
    step = np.append(np.diff(s) / dt, 0.0)
    v_world = tan * step[:, None]

    yaw = np.empty(K)
    prev = initial_yaw
    for k in range(K):
        h = np.hypot(tan[k, 0], tan[k, 1])
        if h > 1e-9:
            prev = np.arctan2(tan[k, 1], tan[k, 0])
        yaw[k] = prev
    yaw = np.unwrap(yaw)
    omega = np.zeros(K)
    omega[:-1] = np.diff(yaw) / dt
    v_body = np.einsum("nji,nj->ni", yaw_rotation(yaw), v_world)

    x = np.column_stack([pos, wrap_angle(yaw)])
    u = np.column_stack([v_body, omega])
    return ReferenceTrajectory(t=dt * np.arange(K), x=x, u=u, dt=dt, source_waypoints=W)


def straight_waypoints(start, goal, n: int = 4) -> NDArray:
    """``n`` equally spaced collinear waypoints from ``start`` to ``goal``."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    return start + np.linspace(0.0, 1.0, max(n, 4))[:, None] * (goal - start)

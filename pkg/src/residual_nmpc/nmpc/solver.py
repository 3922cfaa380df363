"""SQP solver for the multiple-shooting NMPC problem.

Each iteration linearizes the shooting defects and obstacle constraints at the
current iterate and solves a condensed QP in the control increments: the
linearized defects are eliminated exactly (``dX = Gamma dU + xi``), so every
full step satisfies them to first order. Obstacle rows carry nonnegative
slacks with an L1 penalty, which keeps the subproblem feasible whenever the
box constraints are. Steps are globalized by backtracking on the exact L1
merit function.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from numpy.typing import NDArray

from residual_nmpc.dynamics import (
    CONTROL_DIM,
    STATE_DIM,
    ControlInput,
    ResidualModel,
    State,
    body_to_world,
    rk4_with_jacobians,
    wrap_angle,
)
from residual_nmpc.errors import ConfigError, DomainError
from residual_nmpc.nmpc.problem import (
    RefSlice,
    build_cost,
    join_w,
    obstacle_constraints,
    shooting_defects,
    split_w,
)
from residual_nmpc.nmpc.qp import solve_qp

log = logging.getLogger(__name__)

_INF4 = (np.inf,) * 4

DEFECT_TOL = 1e-6
OBSTACLE_TOL = 1e-4


@dataclass(frozen=True)
class NmpcConfig:
    """Horizon, weights, bounds and solver settings.

    ``Q`` and ``R`` are diagonals; bounds on controls are symmetric boxes
    ``|v_i| <= v_max`` per axis and ``|omega| <= omega_max``.
    """

    N: int = 15
    dt: float = 0.1
    Q: tuple[float, ...] = (10.0, 10.0, 10.0, 1.0)
    R: tuple[float, ...] = (1.0, 1.0, 1.0, 0.5)
    v_max: float = 2.0
    omega_max: float = 1.5
    x_min: tuple[float, ...] = tuple(-v for v in _INF4)
    x_max: tuple[float, ...] = _INF4
    d_o: float = 1.0
    max_sqp_iters: int = 20
    # converged once the SQP step (infinity norm, meters/radians) drops below this
    kkt_tol: float = 1e-3
    rho: float = 1e4
    # small quadratic weight on the slacks keeps the QP Hessian definite
    slack_reg: float = 1e-4
    # obstacle/state pairs farther apart than d_o + prune_margin are left out of the QP
    prune_margin: float = 1.5

    def __post_init__(self):
        problems = []
        if int(self.N) != self.N or self.N < 1:
            problems.append(f"N must be an integer >= 1 (got {self.N})")
        if not self.dt > 0:
            problems.append(f"dt must be > 0 (got {self.dt})")
        if len(self.Q) != 4 or min(self.Q) < 0:
            problems.append(f"Q must have 4 entries >= 0 (got {self.Q})")
        if len(self.R) != 4 or min(self.R) <= 0:
            problems.append(f"R must have 4 entries > 0 (got {self.R})")
        if not self.v_max >= 0 or not self.omega_max >= 0:
            problems.append("v_max and omega_max must be >= 0")
        if not self.d_o > 0:
            problems.append(f"d_o must be > 0 (got {self.d_o})")
        if len(self.x_min) != 4 or len(self.x_max) != 4 or np.any(np.asarray(self.x_min) > np.asarray(self.x_max)):
            problems.append("x_min/x_max must be 4-vectors with x_min <= x_max")
        if self.max_sqp_iters < 1 or not self.kkt_tol > 0:
            problems.append("max_sqp_iters must be >= 1 and kkt_tol > 0")
        if problems:
            raise ConfigError("invalid nmpc config: " + "; ".join(problems))

    @property
    def u_lo(self) -> NDArray:
        return -self.u_hi

    @property
    def u_hi(self) -> NDArray:
        return np.array([self.v_max] * 3 + [self.omega_max], dtype=float)

    def to_dict(self) -> dict:
        def enc(t):
            return [None if not np.isfinite(v) else float(v) for v in t]

        return {
            "N": self.N,
            "dt": self.dt,
            "Q": list(self.Q),
            "R": list(self.R),
            "v_max": self.v_max,
            "omega_max": self.omega_max,
            "x_min": enc(self.x_min),
            "x_max": enc(self.x_max),
            "d_o": self.d_o,
            "max_sqp_iters": self.max_sqp_iters,
            "kkt_tol": self.kkt_tol,
            "rho": self.rho,
            "slack_reg": self.slack_reg,
            "prune_margin": self.prune_margin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> NmpcConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown nmpc config field(s): {sorted(unknown)}")
        kw = dict(d)
        for key, fill in (("x_min", -np.inf), ("x_max", np.inf)):
            if key in kw:
                kw[key] = tuple(fill if v is None else float(v) for v in kw[key])
        for key in ("Q", "R"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class Obstacle:
    center: NDArray[np.float64]

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        if c.shape != (3,) or not np.all(np.isfinite(c)):
            raise DomainError(f"obstacle center must be a finite 3-vector, got {self.center!r}")
        object.__setattr__(self, "center", c)


def obstacle_centers(obstacles) -> NDArray:
    if obstacles is None:
        return np.zeros((0, 3))
    if isinstance(obstacles, np.ndarray):
        return obstacles.reshape(-1, 3).astype(float)
    return np.array([o.center if isinstance(o, Obstacle) else o for o in obstacles], dtype=float).reshape(-1, 3)


@dataclass
class NmpcSolution:
    """Solver output. ``status`` is one of converged, max-iters, infeasible-qp."""

    w: NDArray[np.float64]
    N: int
    cost: float
    kkt_residual: float
    sqp_iters: int
    status: str
    solve_time: float
    max_slack: float = 0.0
    defect_norm: float = 0.0
    max_g2: float = -np.inf
    merit_trace: list[float] = field(default_factory=list)
    gp_variance: NDArray[np.float64] | None = None

    @property
    def U(self) -> NDArray:
        return split_w(self.w, self.N)[0]

    @property
    def X(self) -> NDArray:
        return split_w(self.w, self.N)[1]

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def first_control(self) -> ControlInput:
        return ControlInput.from_array(self.U[0])

    def predicted_next_state(self) -> State:
        return State.from_array(self.X[1])


def _condense(Ad, Bd, g1, N):
    """``dX = Gamma dU + xi`` from the linearized defects."""
    nx, nu = STATE_DIM, CONTROL_DIM
    G = g1.reshape(N + 1, nx)
    Gamma = np.zeros(((N + 1) * nx, N * nu))
    xi = np.zeros((N + 1, nx))
    xi[0] = G[0]
    for i in range(1, N + 1):
        r, rp = i * nx, (i - 1) * nx
        xi[i] = Ad[i - 1] @ xi[i - 1] + G[i]
        Gamma[r : r + nx, : (i - 1) * nu] = Ad[i - 1] @ Gamma[rp : rp + nx, : (i - 1) * nu]
        Gamma[r : r + nx, (i - 1) * nu : i * nu] = Bd[i - 1]
    return Gamma, xi.ravel()


class NmpcSolver:
    """Stateful solver instance (keeps the last solution for warm starts).

    Parameters
    ----------
    cfg : NmpcConfig
    model : residual model (e.g. ``SgpModelSet``) or None for the nominal model
    B_z : selector mapping the 3 residual components into the state derivative
    debug_stream : optional text stream receiving one JSON record per SQP iteration
    """

    def __init__(
        self,
        cfg: NmpcConfig,
        model: ResidualModel | None = None,
        B_z: NDArray | None = None,
        debug_stream: IO[str] | None = None,
    ):
        self.cfg = cfg
        self.model = model
        self.B_z = B_z
        self.debug_stream = debug_stream
        self.last: NmpcSolution | None = None

    # merit pieces -------------------------------------------------------
    def _merit(self, w, ref, x_cur, centers):
        cfg = self.cfg
        J, _ = build_cost(ref, w, cfg.Q, cfg.R)
        g1 = shooting_defects(w, x_cur, cfg.N, cfg.dt, self.model, self.B_z)
        g2 = obstacle_constraints(w, cfg.N, centers, cfg.d_o) if len(centers) else np.zeros(0)
        viol = np.sum(np.abs(g1)) + np.sum(np.maximum(g2, 0.0))
        return J + cfg.rho * viol, J, g1, g2

    def _initial_guess(self, x_cur, ref, warm_start, shift):
        cfg = self.cfg
        if warm_start is not None and warm_start.N == cfg.N:
            U, X = warm_start.U.copy(), warm_start.X.copy()
            if shift:
                U = np.vstack([U[1:], U[-1:]])
                x_end = rk4_with_jacobians(X[-1:], U[-1:], cfg.dt, self.model, self.B_z)[0]
                X = np.vstack([X[1:], x_end])
            return join_w(np.clip(U, cfg.u_lo, cfg.u_hi), X)
        # cold start: states on the reference (obstacle-free by construction), not a
        # rollout, which can cut through obstacles when the yaw disagrees with the reference
        U = np.clip(ref.u_ref, cfg.u_lo, cfg.u_hi)
        X = ref.x_ref.copy()
        X[0] = x_cur
        X[1:, 3] = x_cur[3] + np.cumsum(wrap_angle(np.diff(X[:, 3])))
        return join_w(U, np.clip(X, cfg.x_min, cfg.x_max))

    def _emit(self, rec: dict):
        if self.debug_stream is not None:
            self.debug_stream.write(json.dumps(rec) + "\n")

    def solve(
        self,
        x_current: State | NDArray,
        ref: RefSlice,
        obstacles: Sequence[Obstacle] | NDArray | None = None,
        warm_start: NmpcSolution | None = None,
        shift: bool = True,
    ) -> NmpcSolution:
        """Run SQP from a cold or (time-shifted) warm start.

        Returns the final iterate. ``kkt_residual`` is the largest of the
        last QP step (infinity norm), the defect norm and the positive part
        of the obstacle constraints.
        """
        cfg = self.cfg
        t_start = time.perf_counter()
        N = cfg.N
        if ref.N != N:
            raise DomainError(f"reference slice covers {ref.N} steps, horizon is {N}")
        x_cur = x_current.as_array() if isinstance(x_current, State) else np.asarray(x_current, dtype=float)
        centers = obstacle_centers(obstacles)
        nu, nx = N * CONTROL_DIM, (N + 1) * STATE_DIM

        w = self._initial_guess(x_cur, ref, warm_start, shift)
        u_lo = np.tile(cfg.u_lo, N)
        u_hi = np.tile(cfg.u_hi, N)
        fixed = (u_hi - u_lo) <= 1e-12
        free = ~fixed
        x_lo = np.tile(np.asarray(cfg.x_min, float), N + 1)
        x_hi = np.tile(np.asarray(cfg.x_max, float), N + 1)
        box_rows = np.flatnonzero(np.isfinite(x_lo[STATE_DIM:]) | np.isfinite(x_hi[STATE_DIM:])) + STATE_DIM
        q_diag = np.tile(2.0 * np.asarray(cfg.Q, float), N + 1)
        r_diag = np.tile(2.0 * np.asarray(cfg.R, float), N)

        merit, J, g1, g2 = self._merit(w, ref, x_cur, centers)
        trace = [float(merit)]
        status, kkt, last_slack, iters = "max-iters", np.inf, 0.0, 0
        for it in range(1, cfg.max_sqp_iters + 1):
            iters = it
            U, X = split_w(w, N)
            _, grad = build_cost(ref, w, cfg.Q, cfg.R)
            g1, Ad, Bd = shooting_defects(w, x_cur, N, cfg.dt, self.model, self.B_z, with_jacobians=True)
            Gamma, xi = _condense(Ad, Bd, g1, N)

            # obstacle rows near the current iterate
            rows_C, rows_d = [], []
            if len(centers):
                g2_all, dg2 = obstacle_constraints(w, N, centers, cfg.d_o, with_jacobian=True)
                near = np.flatnonzero(g2_all.reshape(len(centers), N) >= -cfg.prune_margin)
            else:
                near = np.zeros(0, dtype=int)
            n_s = near.size

            # dU = E z_u + dU0, with fixed controls moved onto their bound
            dU0 = np.zeros(nu)
            dU0[fixed] = u_lo[fixed] - U.ravel()[fixed]
            E = np.eye(nu)[:, free]
            G_free = Gamma @ E
            xi_eff = xi + Gamma @ dU0
            ex = grad[nu:] + q_diag * xi_eff  # d/d dX of the quadratic model at dU = dU0
            H_u = E.T @ (r_diag[:, None] * E) + G_free.T @ (q_diag[:, None] * G_free)
            g_u = E.T @ (grad[:nu] + r_diag * dU0) + G_free.T @ ex
            n_z = H_u.shape[0] + n_s
            H = np.zeros((n_z, n_z))
            H[: H_u.shape[0], : H_u.shape[0]] = H_u
            H[H_u.shape[0] :, H_u.shape[0] :] = cfg.slack_reg * np.eye(n_s)
            gq = np.concatenate([g_u, np.full(n_s, cfg.rho)])
            nf = H_u.shape[0]

            # control bounds on free variables
            uf = U.ravel()[free] + dU0[free]
            rows_C.append(np.hstack([np.eye(nf), np.zeros((nf, n_s))]))
            rows_d.append(u_hi[free] - uf)
            rows_C.append(np.hstack([-np.eye(nf), np.zeros((nf, n_s))]))
            rows_d.append(uf - u_lo[free])
            # state box
            if box_rows.size:
                xs = X.ravel()[box_rows] + xi_eff[box_rows]
                Gb = G_free[box_rows]
                hi_ok = np.isfinite(x_hi[box_rows])
                lo_ok = np.isfinite(x_lo[box_rows])
                rows_C.append(np.hstack([Gb[hi_ok], np.zeros((hi_ok.sum(), n_s))]))
                rows_d.append(x_hi[box_rows][hi_ok] - xs[hi_ok])
                rows_C.append(np.hstack([-Gb[lo_ok], np.zeros((lo_ok.sum(), n_s))]))
                rows_d.append(xs[lo_ok] - x_lo[box_rows][lo_ok])
            # linearized obstacle rows: g2 + dg2 . dp <= s, s >= 0
            if n_s:
                j_idx, i_idx = np.unravel_index(near, (len(centers), N))
                Cg = np.zeros((n_s, nf))
                dg0 = np.zeros(n_s)
                for r, (j, i) in enumerate(zip(j_idx, i_idx)):
                    cols = slice((i + 1) * STATE_DIM, (i + 1) * STATE_DIM + 3)
                    Cg[r] = dg2[j, i] @ G_free[cols]
                    dg0[r] = dg2[j, i] @ xi_eff[cols]
                rows_C.append(np.hstack([Cg, -np.eye(n_s)]))
                rows_d.append(-(g2_all[near] + dg0))
                rows_C.append(np.hstack([np.zeros((n_s, nf)), -np.eye(n_s)]))
                rows_d.append(np.zeros(n_s))
            qp = solve_qp(H, gq, np.vstack(rows_C), np.concatenate(rows_d))
            if qp.status != "optimal":
                status = "infeasible-qp" if qp.status == "infeasible" else "max-iters"
                log.warning("QP subproblem %s at SQP iteration %d", qp.status, it)
                self._emit({"iter": it, "event": "qp-" + qp.status})
                break
            dU = E @ qp.z[:nf] + dU0
            dX = Gamma @ dU + xi
            slack = qp.z[nf:]
            last_slack = float(slack.max()) if n_s else 0.0
            dw = np.concatenate([dU, dX])
            step_norm = float(np.max(np.abs(dw)))

            # L1 merit line search
            viol0 = np.sum(np.abs(g1)) + (np.sum(np.maximum(g2, 0.0)) if g2.size else 0.0)
            D = grad @ dw - cfg.rho * viol0 + cfg.rho * float(np.sum(slack))
            t = 1.0
            accepted = False
            for _ in range(30):
                w_try = w + t * dw
                m_try, J_try, g1_try, g2_try = self._merit(w_try, ref, x_cur, centers)
                if m_try <= merit + 1e-4 * t * min(D, 0.0) or m_try <= merit and step_norm * t < 1e-9:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                w, merit, J, g1, g2 = w_try, m_try, J_try, g1_try, g2_try
                trace.append(float(merit))
            feas_g1 = float(np.max(np.abs(g1)))
            feas_g2 = float(np.max(g2)) if g2.size else -np.inf
            kkt = max(step_norm * (t if accepted else 1.0), feas_g1, max(feas_g2, 0.0))
            self._emit(
                {
                    "iter": it,
                    "cost": J,
                    "merit": merit,
                    "kkt_residual": kkt,
                    "step_length": t if accepted else 0.0,
                    "step_norm": step_norm,
                    "qp_iters": qp.iterations,
                    "active": len(qp.active),
                }
            )
            if step_norm <= cfg.kkt_tol and feas_g1 <= DEFECT_TOL and feas_g2 <= OBSTACLE_TOL:
                status = "converged"
                break
            if not accepted:
                # no merit decrease along the QP direction: stationary for the penalty problem
                log.debug("line search failed at SQP iteration %d (step %.3g)", it, step_norm)
                if feas_g1 <= DEFECT_TOL and feas_g2 <= OBSTACLE_TOL and step_norm <= 1e3 * cfg.kkt_tol:
                    status = "converged"
                break

        # QP steps land on active control bounds only up to round-off
        U, X = split_w(w, N)
        w = join_w(np.clip(U, cfg.u_lo, cfg.u_hi), X)
        g2_final = obstacle_constraints(w, N, centers, cfg.d_o) if len(centers) else np.zeros(0)
        gp_var = None
        if self.model is not None and hasattr(self.model, "variance"):
            Uf, Xf = split_w(w, N)
            v_world = body_to_world(Xf[:-1, 3], Uf[:, :3])
            gp_var = self.model.variance(v_world)
        sol = NmpcSolution(
            w=w,
            N=N,
            cost=float(J),
            kkt_residual=float(kkt),
            sqp_iters=iters,
            status=status,
            solve_time=time.perf_counter() - t_start,
            max_slack=last_slack,
            defect_norm=float(np.max(np.abs(g1))),
            max_g2=float(np.max(g2_final)) if g2_final.size else -np.inf,
            merit_trace=trace,
            gp_variance=gp_var,
        )
        self.last = sol
        return sol


def solve(
    cfg: NmpcConfig,
    x_current,
    ref_slice: RefSlice,
    obstacles=None,
    warm_start: NmpcSolution | None = None,
    model: ResidualModel | None = None,
    shift: bool = True,
) -> NmpcSolution:
    """Functional wrapper around :class:`NmpcSolver`."""
    return NmpcSolver(cfg, model).solve(x_current, ref_slice, obstacles, warm_start, shift=shift)

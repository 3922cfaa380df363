"""Closed-loop simulation: reference slicing, sensing, NMPC, plant, regeneration."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

import numpy as np
from numpy.typing import NDArray

from residual_nmpc.dynamics import PlantConfig, ResidualModel, State, body_to_world, plant_step, rk4_with_jacobians
from residual_nmpc.errors import DataError, DomainError
from residual_nmpc.nmpc.solver import NmpcConfig, NmpcSolver, obstacle_centers
from residual_nmpc.planner.reference import ReferenceTrajectory
from residual_nmpc.planner.regenerate import RegenerationTracker, maybe_regenerate
from residual_nmpc.planner.world import WorldModel, visible_obstacles

log = logging.getLogger(__name__)

_AX4 = ("px", "py", "pz", "yaw")
CSV_COLUMNS = (
    ["t"]
    + [f"x_{a}" for a in _AX4]
    + ["u_vx", "u_vy", "u_vz", "u_omega"]
    + [f"xbar_{a}" for a in _AX4]
    + [f"xhat_{a}" for a in _AX4]
    + ["vhat_x", "vhat_y", "vhat_z", "ref_px", "ref_py", "ref_pz"]
    + ["solve_time", "sqp_iters", "regenerated", "status"]
)


@dataclass
class RunLog:
    """One row per applied control.

    ``xbar`` is the model's one-step prediction from ``x`` under ``u``;
    ``xhat`` and ``vhat`` are the plant's state and world velocity after the
    step. ``ref_pos`` is the reference position the step was aiming for.
    """

    dt: float
    t: NDArray[np.float64]
    x: NDArray[np.float64]
    u: NDArray[np.float64]
    xbar: NDArray[np.float64]
    xhat: NDArray[np.float64]
    vhat: NDArray[np.float64]
    ref_pos: NDArray[np.float64]
    solve_time: NDArray[np.float64]
    sqp_iters: NDArray[np.int64]
    regenerated: NDArray[np.bool_]
    status: list[str]
    goal: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    termination: str = "max_steps"
    wall_time: float = 0.0
    min_clearance: float = np.inf
    unreachable: bool = False

    def __len__(self) -> int:
        return len(self.t)

    @property
    def success(self) -> bool:
        return self.termination == "goal"

    @property
    def regenerations(self) -> int:
        return int(np.sum(self.regenerated))

    def position_rmse(self) -> float:
        if len(self) == 0:
            return 0.0
        e = self.xhat[:, :3] - self.ref_pos
        return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))

    def traversed_distance(self) -> float:
        if len(self) == 0:
            return 0.0
        P = np.vstack([self.x[:1, :3], self.xhat[:, :3]])
        return float(np.sum(np.linalg.norm(np.diff(P, axis=0), axis=1)))

    def summary(self) -> dict:
        st = self.solve_time
        return {
            "steps": len(self),
            "dt": self.dt,
            "success": self.success,
            "termination": self.termination,
            "unreachable": self.unreachable,
            "position_rmse": self.position_rmse(),
            "traversed_distance": self.traversed_distance(),
            "final_goal_distance": float(np.linalg.norm(self.xhat[-1, :3] - self.goal)) if len(self) else None,
            "min_clearance": None if not np.isfinite(self.min_clearance) else self.min_clearance,
            "regenerations": self.regenerations,
            "median_solve_time": float(np.median(st)) if len(st) else None,
            "max_solve_time": float(np.max(st)) if len(st) else None,
            "converged_fraction": float(np.mean([s == "converged" for s in self.status])) if self.status else None,
            "wall_time": self.wall_time,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for k in range(len(self)):
                row = [self.t[k], *self.x[k], *self.u[k], *self.xbar[k], *self.xhat[k], *self.vhat[k], *self.ref_pos[k]]
                w.writerow(
                    [repr(float(v)) for v in row]
                    + [repr(float(self.solve_time[k])), int(self.sqp_iters[k]), int(self.regenerated[k]), self.status[k]]
                )

    @classmethod
    def from_csv(cls, path) -> RunLog:
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
        if header is None:
            raise DataError(f"{path}: empty run log")
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: run log is missing column(s) {missing}")
        idx = {c: header.index(c) for c in CSV_COLUMNS}
        try:
            num = {c: np.array([float(r[idx[c]]) for r in rows]) for c in CSV_COLUMNS if c != "status"}
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: malformed run log row ({exc})") from None

        def cols(prefix, names):
            return np.column_stack([num[f"{prefix}{a}"] for a in names]) if rows else np.zeros((0, len(names)))

        t = num["t"]
        dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(
            dt=dt,
            t=t,
            x=cols("x_", _AX4),
            u=cols("u_", ("vx", "vy", "vz", "omega")),
            xbar=cols("xbar_", _AX4),
            xhat=cols("xhat_", _AX4),
            vhat=cols("vhat_", "xyz"),
            ref_pos=cols("ref_", ("px", "py", "pz")),
            solve_time=num["solve_time"],
            sqp_iters=num["sqp_iters"].astype(np.int64),
            regenerated=num["regenerated"].astype(bool),
            status=[r[idx["status"]] for r in rows],
        )


def closed_loop_run(
    cfg: NmpcConfig,
    world: WorldModel,
    ref: ReferenceTrajectory,
    plant: PlantConfig,
    model: ResidualModel | None = None,
    max_steps: int = 1000,
    *,
    x0=None,
    v0=None,
    regenerate: bool = True,
    threshold: float = 2.0,
    goal_tol: float = 0.3,
    detour_margin: float = 1.0,
    debug_stream: IO[str] | None = None,
    B_z: NDArray | None = None,
) -> RunLog:
    """Track ``ref`` on the plant with warm-started NMPC until goal, step limit or unreachable.

    The vehicle starts at ``x0`` (default: first reference sample) at rest
    unless ``v0`` is given. The goal is the last sample of ``ref``.
    """
    if abs(cfg.dt - ref.dt) > 1e-12:
        raise DomainError(f"NMPC dt {cfg.dt} differs from reference dt {ref.dt}")
    wall0 = time.perf_counter()
    solver = NmpcSolver(cfg, model, B_z=B_z, debug_stream=debug_stream)
    tracker = RegenerationTracker()
    goal = ref.goal
    x = ref.x[0].copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    v = np.zeros(3) if v0 is None else np.asarray(v0, dtype=float).copy()
    u_lo, u_hi = cfg.u_lo, cfg.u_hi

    rows: dict[str, list] = {k: [] for k in ("x", "u", "xbar", "xhat", "vhat", "ref", "st", "it", "rg", "status")}
    idx = 0
    warm = None
    termination = "max_steps"
    min_clear = world.clearance(x[:3])
    for step in range(max_steps):
        sl = ref.slice(idx, cfg.N)
        obs = visible_obstacles(world, x[:3])
        sol = solver.solve(x, sl, obstacle_centers(obs), warm_start=warm)
        warm = sol
        u = np.clip(sol.U[0], u_lo, u_hi)
        xbar = rk4_with_jacobians(x[None, :], u[None, :], cfg.dt, model, B_z)[0][0]
        x_next, v = plant_step(plant, x, v, u, cfg.dt)
        rows["x"].append(x.copy())
        rows["u"].append(u)
        rows["xbar"].append(xbar)
        rows["xhat"].append(x_next.copy())
        rows["vhat"].append(v.copy())
        rows["ref"].append(sl.x_ref[1, :3].copy())
        rows["st"].append(sol.solve_time)
        rows["it"].append(sol.sqp_iters)
        rows["status"].append(sol.status)
        x = x_next
        min_clear = min(min_clear, world.clearance(x[:3]))
        idx += 1
        regen = False
        if np.linalg.norm(x[:3] - goal) <= goal_tol:
            rows["rg"].append(False)
            termination = "goal"
            break
        if regenerate:
            new_ref = maybe_regenerate(
                ref,
                State.from_array(x),
                threshold,
                world,
                tracker,
                start_index=idx,
                d_o=cfg.d_o,
                margin=detour_margin,
                step=step,
            )
            if new_ref is not ref:
                ref, idx, warm, regen = new_ref, 0, None, True
        rows["rg"].append(regen)
        if tracker.unreachable:
            termination = "unreachable"
            break

    n = len(rows["x"])
    return RunLog(
        dt=cfg.dt,
        t=cfg.dt * np.arange(n),
        x=np.array(rows["x"]).reshape(n, 4),
        u=np.array(rows["u"]).reshape(n, 4),
        xbar=np.array(rows["xbar"]).reshape(n, 4),
        xhat=np.array(rows["xhat"]).reshape(n, 4),
        vhat=np.array(rows["vhat"]).reshape(n, 3),
        ref_pos=np.array(rows["ref"]).reshape(n, 3),
        solve_time=np.array(rows["st"], dtype=float),
        sqp_iters=np.array(rows["it"], dtype=np.int64),
        regenerated=np.array(rows["rg"], dtype=bool),
        status=rows["status"],
        goal=goal,
        termination=termination,
        wall_time=time.perf_counter() - wall0,
        min_clearance=min_clear,
        unreachable=tracker.unreachable,
    )


def commanded_world_velocity(log: RunLog) -> NDArray:
    """World-frame commanded velocity at the end of each control interval.

    The body-frame command is rotated by the predicted end-of-interval yaw,
    the instant at which the plant velocity ``vhat`` is sampled.
    """
    return body_to_world(log.xbar[:, 3], log.u[:, :3])

"""Experiment building blocks shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from typing import IO

import numpy as np
from numpy.typing import NDArray

from residual_nmpc.config import ExperimentConfig
from residual_nmpc.dynamics import plant_step
from residual_nmpc.nmpc.solver import NmpcSolver, obstacle_centers
from residual_nmpc.errors import DomainError
from residual_nmpc.planner.closed_loop import RunLog, closed_loop_run
from residual_nmpc.planner.reference import ReferenceTrajectory, generate_reference
from residual_nmpc.planner.world import WorldModel, visible_obstacles

log = logging.getLogger(__name__)


def random_waypoints(rng: np.random.Generator, cfg: ExperimentConfig) -> NDArray:
    """A random walk of waypoints with bounded step length inside the world box."""
    gen = cfg.reference.generator
    lo = np.array([gen.margin, gen.margin, gen.z_range[0]])
    hi = np.array([cfg.world.bounds[0] - gen.margin, cfg.world.bounds[1] - gen.margin, gen.z_range[1]])
    if np.any(hi <= lo):
        raise DomainError("world bounds leave no room for waypoints after the margin")
    W = [rng.uniform(lo, hi)]
    heading = rng.uniform(-np.pi, np.pi)
    while len(W) < gen.n_waypoints:
        for _ in range(200):
            # mostly forward, so the path does not fold back on itself
            h = heading + rng.uniform(-np.pi / 2, np.pi / 2)
            r = rng.uniform(gen.min_step, gen.max_step)
            q = W[-1] + np.array([r * np.cos(h), r * np.sin(h), 0.0])
            q[2] = rng.uniform(*gen.z_range)
            if np.all(q >= lo) and np.all(q <= hi):
                W.append(q)
                heading = h
                break
        else:
            heading += np.pi  # boxed in: turn round and retry
    return np.array(W)


def make_references(cfg: ExperimentConfig, seed: int | None = None) -> list[ReferenceTrajectory]:
    """The configured reference(s): explicit waypoints, or ``generator.count`` random ones."""
    ref = cfg.reference
    if ref.waypoints is not None:
        return [generate_reference(np.array(ref.waypoints), ref.v_max, ref.dt)]
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    out = []
    for _ in range(ref.generator.count):
        W = random_waypoints(rng, cfg)
        speed = ref.v_max * rng.uniform(*ref.generator.speed_range)
        yaw0 = float(np.arctan2(W[1, 1] - W[0, 1], W[1, 0] - W[0, 0]))
        out.append(generate_reference(W, speed, ref.dt, initial_yaw=yaw0))
    return out


def path_world(cfg: ExperimentConfig, ref: ReferenceTrajectory, seed: int) -> WorldModel:
    """Obstacles scattered close to the reference path, away from its ends.

    Points sit at random arc positions with a horizontal offset of at most
    ``world.path_offset`` so the vehicle must swerve round them. They keep a
    mutual spacing that leaves a passable gap.
    """
    ws = cfg.world
    rng = np.random.default_rng(seed)
    P = ref.x[:, :3]
    start, goal = P[0], P[-1]
    ok = (np.linalg.norm(P - start, axis=1) > ws.endpoint_keepout) & (np.linalg.norm(P - goal, axis=1) > ws.endpoint_keepout)
    idx = np.flatnonzero(ok)
    min_gap = 2.0 * cfg.nmpc.d_o + 0.5
    pts: list[NDArray] = []
    tries = 0
    while len(pts) < ws.obstacle_count and len(idx) and tries < 1000 * max(ws.obstacle_count, 1):
        tries += 1
        k = int(rng.choice(idx))
        yaw = ref.x[k, 3]
        side = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
        c = P[k] + rng.uniform(-ws.path_offset, ws.path_offset) * side
        if pts and np.min(np.linalg.norm(np.array(pts) - c, axis=1)) < min_gap:
            continue
        pts.append(c)
    if len(pts) < ws.obstacle_count:
        log.warning("placed %d of %d obstacles along the path", len(pts), ws.obstacle_count)
    return WorldModel(
        obstacles=np.array(pts).reshape(-1, 3), sensing_radius=ws.sensing_radius, goal=goal, start=start
    )


def empty_world(cfg: ExperimentConfig, ref: ReferenceTrajectory) -> WorldModel:
    return WorldModel(sensing_radius=cfg.world.sensing_radius, goal=ref.goal, start=ref.x[0, :3])


def fly(
    cfg: ExperimentConfig,
    ref: ReferenceTrajectory,
    world: WorldModel,
    model=None,
    debug_stream: IO[str] | None = None,
    max_steps: int | None = None,
) -> RunLog:
    r = cfg.run
    return closed_loop_run(
        cfg.nmpc,
        world,
        ref,
        cfg.plant,
        model,
        max_steps=r.max_steps if max_steps is None else max_steps,
        regenerate=r.regenerate,
        threshold=r.threshold,
        goal_tol=r.goal_tol,
        detour_margin=r.detour_margin,
        debug_stream=debug_stream,
    )


def _fly_one(cfg, ref, i, obstacles, model, debug_stream=None) -> RunLog:
    world = path_world(cfg, ref, seed=cfg.seed * 1000 + i) if obstacles else empty_world(cfg, ref)
    lg = fly(cfg, ref, world, model, debug_stream)
    log.info("trajectory %d: %s after %d steps", i, lg.termination, len(lg))
    return lg


def fly_all(
    cfg: ExperimentConfig,
    refs: list[ReferenceTrajectory],
    ids: list[int],
    obstacles: bool,
    model=None,
    debug_stream: IO[str] | None = None,
    workers: int = 1,
) -> list[RunLog]:
    """Fly references ``ids``; with obstacles, trajectory ``i`` gets a world seeded from (seed, i).

    ``workers > 1`` flies in separate processes (the logs are identical
    apart from solve times). A debug stream forces serial execution.
    """
    if workers > 1 and debug_stream is None and len(ids) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_fly_one, cfg, refs[i], i, obstacles, model) for i in ids]
            return [f.result() for f in futs]
    return [_fly_one(cfg, refs[i], i, obstacles, model, debug_stream) for i in ids]


def record_problems(cfg: ExperimentConfig, ref: ReferenceTrajectory, world: WorldModel, steps: int) -> list[tuple]:
    """NMPC problems met along a nominal closed-loop flight (without regeneration).

    Each entry is ``(x_current, ref_slice, obstacle_centers, warm_start)``.
    Replaying one recorded sequence lets different residual models be timed
    on identical problems.
    """
    solver = NmpcSolver(cfg.nmpc)
    x = ref.x[0].copy()
    v = np.zeros(3)
    warm = None
    problems = []
    for k in range(steps):
        sl = ref.slice(k, cfg.nmpc.N)
        C = obstacle_centers(visible_obstacles(world, x[:3]))
        problems.append((x.copy(), sl, C, warm))
        warm = solver.solve(x, sl, C, warm_start=warm)
        u = np.clip(warm.U[0], cfg.nmpc.u_lo, cfg.nmpc.u_hi)
        x, v = plant_step(cfg.plant, x, v, u, cfg.nmpc.dt)
    return problems


def time_solves(cfg: ExperimentConfig, problems: list[tuple], models: list, repeats: int = 5) -> list[NDArray]:
    """Per-model, per-problem solve cost: the fastest of ``repeats`` attempts.

    Attempts are interleaved round-robin over models and problems so slow
    spells of the host hit every model alike, and cost is process CPU time
    so other tenants' load is not counted.
    """
    solvers = [NmpcSolver(cfg.nmpc, m) for m in models]
    best = np.full((len(models), len(problems)), np.inf)
    for _ in range(repeats):
        for i, (x, sl, C, warm) in enumerate(problems):
            for j, solver in enumerate(solvers):
                t0 = time.process_time()
                solver.solve(x, sl, C, warm_start=warm)
                best[j, i] = min(best[j, i], time.process_time() - t0)
    return [row for row in best]


def split_ids(n: int, train_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Trajectory-level split of ``range(n)``."""
    if n < 2:
        raise DomainError("need at least two trajectories for a train/test split")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(np.clip(round(train_fraction * n), 1, n - 1))
    return sorted(int(i) for i in perm[:k]), sorted(int(i) for i in perm[k:])

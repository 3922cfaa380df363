"""Reference regeneration when the vehicle drifts too far from its reference.

A receding-horizon planner pressed against an obstacle cluster can stall in
a local minimum while its time-indexed reference runs ahead. Once the
deviation exceeds a threshold the reference is rebuilt from the current
position to the goal, detouring sideways around the obstacles currently in
view.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from residual_nmpc.dynamics import State
from residual_nmpc.errors import DomainError
from residual_nmpc.nmpc.solver import obstacle_centers
from residual_nmpc.planner.reference import ReferenceTrajectory, generate_reference
from residual_nmpc.planner.world import WorldModel, visible_obstacles

log = logging.getLogger(__name__)

STAGNATION_LIMIT = 5
MIN_PROGRESS = 0.5  # meters toward the goal between regenerations


@dataclass
class RegenerationTracker:
    """Counts regenerations and flags the goal unreachable after repeated stagnation."""

    count: int = 0
    stagnant: int = 0
    unreachable: bool = False
    last_goal_distance: float | None = None
    events: list[dict] = field(default_factory=list)

    def record(self, p: NDArray, goal: NDArray, step: int | None = None) -> None:
        p = np.asarray(p, dtype=float)
        dist = float(np.linalg.norm(goal - p))
        if self.last_goal_distance is not None and self.last_goal_distance - dist < MIN_PROGRESS:
            self.stagnant += 1
        else:
            self.stagnant = 0
        self.last_goal_distance = dist
        self.count += 1
        self.events.append({"step": step, "position": p.tolist(), "goal_distance": dist})
        if self.stagnant >= STAGNATION_LIMIT:
            self.unreachable = True


def _polyline_distance(C: NDArray, a: NDArray, b: NDArray) -> NDArray:
    ab = b - a
    t = np.clip((C - a) @ ab / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(C - (a + t[:, None] * ab), axis=1)


def _densify(points: list[NDArray], spacing: float) -> NDArray:
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(int(np.ceil(np.linalg.norm(b - a) / spacing)), 1)
        for k in range(1, n + 1):
            q = a + (b - a) * k / n
            if np.linalg.norm(q - out[-1]) > 1e-6:
                out.append(q)
    return np.array(out)


def detour_waypoints(p0, goal, centers, clearance: float, side: int = 0, spacing: float = 1.0) -> NDArray:
    """Waypoints from ``p0`` to ``goal`` passing obstacles laterally.

    Obstacles within ``clearance`` of the straight segment are collected and
    the path is shifted horizontally past all of them, on the side needing the
    smaller shift (``side=0``) or on the given side (+1 left, -1 right of the
    travel direction). The detour leg starts ``clearance`` before the first
    blocking obstacle and ends ``clearance`` after the last. The polyline is
    densified so the approximating spline hugs it.
    """
    p0 = np.asarray(p0, dtype=float)
    goal = np.asarray(goal, dtype=float)
    C = obstacle_centers(centers)
    L = float(np.linalg.norm(goal - p0))
    if L < 1e-9:
        raise DomainError("cannot plan a detour: start coincides with goal")
    d = (goal - p0) / L
    n = np.cross([0.0, 0.0, 1.0], d)
    if np.linalg.norm(n) < 1e-9:
        n = np.array([1.0, 0.0, 0.0])
    n /= np.linalg.norm(n)

    def straight():
        return _densify([p0, goal], spacing)

    if len(C) == 0:
        return _ensure_four(straight(), p0, goal)
    rel = C - p0
    along = rel @ d
    lateral = rel @ n
    blocking = _polyline_distance(C, p0, goal) < clearance
    if not blocking.any():
        return _ensure_four(straight(), p0, goal)

    pts = None
    for _ in range(len(C) + 1):
        lat_b = lateral[blocking]
        left = lat_b.max() + clearance
        right = lat_b.min() - clearance
        if side > 0:
            off = left
        elif side < 0:
            off = right
        else:
            off = left if abs(left) <= abs(right) else right
        a1 = along[blocking].min() - clearance
        a2 = min(along[blocking].max() + clearance, L)
        q1 = p0 + a1 * d + off * n
        q2 = p0 + a2 * d + off * n
        pts = [p0, q1, q2, goal]
        # obstacles crowding the detour or the return leg join the blocking set
        near = (_polyline_distance(C, q1, q2) < clearance) | (_polyline_distance(C, q2, goal) < clearance)
        grown = blocking | near
        if np.array_equal(grown, blocking):
            break
        blocking = grown
    return _ensure_four(_densify(pts, spacing), p0, goal)


def _ensure_four(W: NDArray, p0, goal) -> NDArray:
    if len(W) >= 4:
        return W
    return p0 + np.linspace(0.0, 1.0, 4)[:, None] * (goal - p0)


def maybe_regenerate(
    ref: ReferenceTrajectory,
    x_actual: State,
    threshold: float,
    world: WorldModel,
    tracker: RegenerationTracker | None = None,
    start_index: int = 0,
    d_o: float = 1.0,
    margin: float = 1.0,
    v_max: float | None = None,
    step: int | None = None,
) -> ReferenceTrajectory:
    """Return ``ref`` unchanged, or a detour reference if the deviation exceeds ``threshold``.

    The deviation is the distance from the vehicle to the nearest reference
    sample at or after ``start_index`` (the sample currently tracked), so a
    vehicle held back while its reference moves on is detected.
    """
    if not threshold > 0:
        raise DomainError(f"regeneration threshold must be > 0, got {threshold}")
    p = np.asarray(x_actual.p, dtype=float)
    _, dev = ref.nearest_index(p, start_index)
    if dev <= threshold:
        return ref
    goal = ref.goal
    if np.linalg.norm(goal - p) < 1e-6:
        return ref
    centers = obstacle_centers(visible_obstacles(world, p))
    side = 0
    if tracker is not None and tracker.stagnant % 2 == 1:
        # no progress after the last detour: try the other way round
        side = -_last_side(tracker)
    W = detour_waypoints(p, goal, centers, d_o + margin, side=side)
    speed = v_max if v_max is not None else float(np.max(np.linalg.norm(ref.u[:, :3], axis=1)))
    new = generate_reference(W, max(speed, 1e-3), ref.dt, initial_yaw=x_actual.alpha)
    if tracker is not None:
        tracker.record(p, goal, step)
        tracker.events[-1]["side"] = _side_of(W, p, goal)
        if tracker.unreachable:
            log.warning("goal flagged unreachable after %d stagnant regenerations", tracker.stagnant)
    log.info("reference regenerated at %s (deviation %.2f m)", np.round(p, 2).tolist(), dev)
    return new


def _side_of(W, p, goal) -> int:
    d = goal - p
    n = np.cross([0.0, 0.0, 1.0], d)
    lat = (W - p) @ n
    k = int(np.argmax(np.abs(lat)))
    return int(np.sign(lat[k])) if abs(lat[k]) > 1e-9 else 0


def _last_side(tracker: RegenerationTracker) -> int:
    for ev in reversed(tracker.events):
        if ev.get("side"):
            return int(ev["side"])
    return -1

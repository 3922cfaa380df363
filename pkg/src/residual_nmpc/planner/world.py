"""Point-obstacle worlds and the local sensing window."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from residual_nmpc.errors import DataError, DomainError
from residual_nmpc.nmpc.solver import Obstacle, obstacle_centers


@dataclass
class WorldModel:
    """Obstacle points, a goal and the radius within which obstacles are sensed."""

    obstacles: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 3)))
    sensing_radius: float = 5.0
    goal: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    start: NDArray[np.float64] | None = None

    def __post_init__(self):
        self.obstacles = obstacle_centers(self.obstacles)
        self.goal = np.asarray(self.goal, dtype=float).reshape(3)
        if self.start is not None:
            self.start = np.asarray(self.start, dtype=float).reshape(3)
        if not self.sensing_radius > 0:
            raise DomainError(f"sensing_radius must be > 0, got {self.sensing_radius}")
        if not np.all(np.isfinite(self.obstacles)):
            raise DomainError("obstacle centers must be finite")

    def clearance(self, P) -> float:
        """Smallest distance from any point in ``P`` (k, 3) to any obstacle."""
        if len(self.obstacles) == 0:
            return np.inf
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        d = np.linalg.norm(P[:, None, :] - self.obstacles[None, :, :], axis=2)
        return float(d.min())

    def to_dict(self) -> dict:
        return {
            "obstacles": self.obstacles.tolist(),
            "sensing_radius": self.sensing_radius,
            "goal": self.goal.tolist(),
            "start": None if self.start is None else self.start.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorldModel:
        try:
            return cls(
                obstacles=np.asarray(d.get("obstacles", []), dtype=float).reshape(-1, 3),
                sensing_radius=float(d.get("sensing_radius", 5.0)),
                goal=d["goal"],
                start=d.get("start"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed world description: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def visible_obstacles(world: WorldModel, p) -> list[Obstacle]:
    """Obstacles within the closed sensing ball around ``p``."""
    if len(world.obstacles) == 0:
        return []
    p = np.asarray(p, dtype=float).reshape(3)
    d = np.linalg.norm(world.obstacles - p, axis=1)
    # closed ball; the tiny slack absorbs round-off in the distance itself
    mask = d <= world.sensing_radius * (1.0 + 1e-12)
    return [Obstacle(c) for c in world.obstacles[mask]]


def random_forest_world(
    seed: int,
    size=(20.0, 20.0, 5.0),
    count: int = 15,
    start=(1.0, 10.0, 2.5),
    goal=(19.0, 10.0, 2.5),
    keepout: float = 2.0,
    min_spacing: float = 0.0,
    sensing_radius: float = 5.0,
) -> WorldModel:
    """Uniformly scattered point obstacles, kept ``keepout`` meters from start and goal.

    ``min_spacing`` optionally rejects points too close to an earlier one.
    """
    rng = np.random.default_rng(seed)
    size = np.asarray(size, dtype=float)
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    pts: list[NDArray] = []
    tries = 0
    while len(pts) < count:
        tries += 1
        if tries > 10000 * max(count, 1):
            raise DomainError(f"could not place {count} obstacles with the given keep-out rules")
        c = rng.uniform(0.0, 1.0, 3) * size
        if min(np.linalg.norm(c - start), np.linalg.norm(c - goal)) < keepout:
            continue
        if min_spacing > 0 and pts and np.min(np.linalg.norm(np.array(pts) - c, axis=1)) < min_spacing:
            continue
        pts.append(c)
    return WorldModel(obstacles=np.array(pts).reshape(-1, 3), sensing_radius=sensing_radius, goal=goal, start=start)


def wall_world(
    wall_x: float = 7.0,
    half_width: float = 4.2,
    spacing: float = 1.2,
    z: float = 2.0,
    start=(0.0, 0.0, 2.0),
    goal=(14.0, 0.0, 2.0),
    sensing_radius: float = 5.0,
) -> WorldModel:
    """A row of points across the straight path, dense enough to be impassable."""
    ys = np.arange(-half_width, half_width + 1e-9, spacing)
    obs = np.column_stack([np.full_like(ys, wall_x), ys, np.full_like(ys, z)])
    return WorldModel(obstacles=obs, sensing_radius=sensing_radius, goal=goal, start=start)

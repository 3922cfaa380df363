"""Reference generation, sensing, regeneration and closed-loop simulation."""

from residual_nmpc.planner.closed_loop import RunLog, closed_loop_run, commanded_world_velocity
from residual_nmpc.planner.reference import ReferenceTrajectory, generate_reference, straight_waypoints
from residual_nmpc.planner.regenerate import RegenerationTracker, detour_waypoints, maybe_regenerate
from residual_nmpc.planner.world import WorldModel, random_forest_world, visible_obstacles, wall_world

__all__ = [
    "ReferenceTrajectory",
    "RegenerationTracker",
    "RunLog",
    "WorldModel",
    "closed_loop_run",
    "commanded_world_velocity",
    "detour_waypoints",
    "generate_reference",
    "maybe_regenerate",
    "random_forest_world",
    "straight_waypoints",
    "visible_obstacles",
    "wall_world",
]

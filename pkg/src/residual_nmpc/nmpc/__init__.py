"""Multiple-shooting NMPC with an in-repo SQP solver."""

from residual_nmpc.nmpc.problem import (
    RefSlice,
    build_cost,
    defect_jacobian,
    join_w,
    obstacle_constraints,
    rollout,
    shooting_defects,
    split_w,
)
from residual_nmpc.nmpc.qp import QpResult, solve_qp
from residual_nmpc.nmpc.solver import NmpcConfig, NmpcSolution, NmpcSolver, Obstacle, obstacle_centers, solve

__all__ = [
    "NmpcConfig",
    "NmpcSolution",
    "NmpcSolver",
    "Obstacle",
    "QpResult",
    "RefSlice",
    "build_cost",
    "defect_jacobian",
    "join_w",
    "obstacle_centers",
    "obstacle_constraints",
    "rollout",
    "shooting_defects",
    "solve",
    "solve_qp",
    "split_w",
]

"""Residual-dynamics learning for a multiple-shooting NMPC quadrotor planner.

A 4-DOF kinematic model drives the planner; a per-axis variational sparse
Gaussian process learns the velocity residual between that model and the
plant, and the planner's motion model is augmented with the GP mean.
"""

from residual_nmpc.errors import (
    ConfigError,
    DataError,
    DomainError,
    ResidualNmpcError,
    SingularKernelError,
    SolverError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DomainError",
    "ResidualNmpcError",
    "SingularKernelError",
    "SolverError",
]

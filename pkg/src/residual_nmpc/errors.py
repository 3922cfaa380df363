"""Exception hierarchy. CLI exit codes are keyed on these classes."""


class ResidualNmpcError(Exception):
    exit_code = 1


class ConfigError(ResidualNmpcError):
    exit_code = 1


class DataError(ResidualNmpcError):
    exit_code = 2


class DomainError(ResidualNmpcError, ValueError):
    """Non-finite or out-of-domain numeric input."""

    exit_code = 2


class SingularKernelError(ResidualNmpcError, ArithmeticError):
    exit_code = 2


class SolverError(ResidualNmpcError):
    exit_code = 3

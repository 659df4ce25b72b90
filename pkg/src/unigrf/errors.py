"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every failure a user can
trigger should surface as one of them.
"""


class UniGRFError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ContractError(UniGRFError, ValueError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Operand shapes do not conform to a primitive's rule."""


class DomainError(UniGRFError, ValueError):
    """A value lies outside a function's mathematical domain."""

    exit_code = 4


class NumericError(UniGRFError, ArithmeticError):
    """Non-finite values appeared during computation."""

    exit_code = 4


class ConfigError(UniGRFError):
    exit_code = 2


class DataError(UniGRFError):
    exit_code = 3

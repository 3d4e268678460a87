"""Exception types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class CembError(Exception):
    exit_code = 1


class UsageError(CembError, ValueError):
    """Caller violated an operation's preconditions."""

    exit_code = 1


class DimensionError(UsageError):
    pass


class ParameterError(UsageError):
    """A hyperparameter is outside its legal range."""


class DataError(CembError):
    """Input file is malformed or references unknown values."""

    exit_code = 2


class NumericalError(CembError, ArithmeticError):
    """NaN/Inf produced, or a value outside an op's mathematical domain."""

    exit_code = 3


class DomainError(NumericalError):
    pass

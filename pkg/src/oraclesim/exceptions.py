"""Exception hierarchy shared by every module."""


class OracleSimError(Exception):
    """Base class for all errors raised by :mod:`oraclesim`."""


class ShapeError(OracleSimError, ValueError):
    """Operand dimensions do not conform."""


class ConfigurationError(OracleSimError, ValueError):
    """A structural constraint (divisibility, chunk size, ...) is violated."""


class RestrictionError(OracleSimError, RuntimeError):
    """The restricted computational model was violated.

    Raised for oracle capacity overruns, constant-padding budget overruns
    and MLP arithmetic budget overruns.
    """


class DegenerateRatioError(OracleSimError, ArithmeticError):
    """A ratio ``x / (1 - x)`` or a normalisation was asked of a degenerate value."""


class NonFiniteError(OracleSimError, ArithmeticError):
    """An operation produced NaN or infinite entries."""

"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class DimlError(Exception):
    """Base class for all package errors."""


class ShapeError(DimlError, ValueError):
    pass


class DomainError(DimlError, ArithmeticError):
    """A numeric operation was asked to leave its domain (log of 0, NaN input, ...)."""


class ConfigError(DimlError, ValueError):
    pass


class InfeasibleError(DimlError):
    """The requested computation would require enumerating an intractable space."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4

"""Exception hierarchy shared by the library and the command-line tool."""


class SupradiffError(Exception):
    """Base class for all package errors."""


class ValidationError(SupradiffError, ValueError):
    """Malformed input: bad shapes, negative weights, unknown keys, ..."""


class NumericalError(SupradiffError, ArithmeticError):
    """A computation became ill-conditioned or diverged."""

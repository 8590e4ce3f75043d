"""Exception hierarchy.

Two families map to CLI exit codes: :class:`InputError` (2) for bad
configuration or data, :class:`NumericalError` (3) for numerical failures.
"""


class ExsetError(Exception):
    """Base class for all package errors."""


class InputError(ExsetError, ValueError):
    pass


class NumericalError(ExsetError, ArithmeticError):
    pass


class DimensionMismatch(InputError):
    pass


class DimensionCap(InputError):
    pass


class NegativeDistance(InputError):
    pass


class OffGridLocation(InputError):
    pass


class GridTooLarge(InputError):
    pass


class DegenerateExtent(InputError):
    pass


class InsufficientData(InputError):
    pass


class ConfigError(InputError):
    pass


class SchemaError(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NotPsd(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class DegenerateTruth(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class FitDiverged(NumericalError):
    pass

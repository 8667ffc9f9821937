"""Exception hierarchy.

Each class carries an ``exit_code`` used by the command-line front end:
2 for configuration problems, 3 for data or schema problems and 4 for
numerical failures.
"""


class OtbumpError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidArgumentError(OtbumpError, ValueError):
    """An argument is outside the domain of the operation."""

    exit_code = 2


class InvalidConfigurationError(OtbumpError, ValueError):
    """A configuration cannot produce a well-defined result."""

    exit_code = 2


class SchemaError(OtbumpError, ValueError):
    """Input data lacks a required column or has the wrong layout."""

    exit_code = 3


class LowStatisticsError(OtbumpError):
    """Too few events survive a selection for the requested test."""

    exit_code = 3


class DegenerateWeightsError(OtbumpError, ArithmeticError):
    """Kernel weights cannot be normalized."""

    exit_code = 4


class DegenerateVarianceError(OtbumpError, ArithmeticError):
    """A variance estimate is exactly zero."""

    exit_code = 4


class NumericFailureError(OtbumpError, ArithmeticError):
    """A numerical routine produced an unusable result.

    ``diagnostics`` holds whatever intermediate quantities help explain it.
    """

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class FitFailureError(NumericFailureError):
    """A model fit produced parameters outside their valid domain."""


class UndefinedMetricError(OtbumpError, ValueError):
    """A metric is undefined for the given input."""

    exit_code = 3

"""Decorrelate classifier scores by optimal transport and run a censored-MLE bump hunt."""

from ._kernels import BACKEND
from .errors import (
    DegenerateVarianceError,
    DegenerateWeightsError,
    FitFailureError,
    InvalidArgumentError,
    InvalidConfigurationError,
    LowStatisticsError,
    NumericFailureError,
    OtbumpError,
    SchemaError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "__version__",
    "DegenerateVarianceError",
    "DegenerateWeightsError",
    "FitFailureError",
    "InvalidArgumentError",
    "InvalidConfigurationError",
    "LowStatisticsError",
    "NumericFailureError",
    "OtbumpError",
    "SchemaError",
    "UndefinedMetricError",
]

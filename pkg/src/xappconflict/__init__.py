"""Conflict evaluation for O-RAN xApps: a surrogate RAN simulator, gradient-boosted
KPI regressors, exact Shapley attribution, conflict graphs, and backdoor-adjusted
treatment-effect estimation."""

from xappconflict.errors import (
    ConfigError,
    CycleError,
    DataError,
    DomainError,
    EstimationError,
    ParseError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CycleError",
    "DataError",
    "DomainError",
    "EstimationError",
    "ParseError",
    "__version__",
]

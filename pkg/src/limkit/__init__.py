"""Linear inverse model forecasting toolkit with learned residual correction."""

from .errors import (
    BranchAmbiguityError,
    ConditioningError,
    ConfigError,
    DataError,
    DivergenceError,
    InstabilityError,
    LimkitError,
    NumericsError,
    ParseError,
)

__version__ = "0.1.0"

__all__ = [
    "LimkitError",
    "ConfigError",
    "DataError",
    "ParseError",
    "NumericsError",
    "ConditioningError",
    "InstabilityError",
    "BranchAmbiguityError",
    "DivergenceError",
    "__version__",
]

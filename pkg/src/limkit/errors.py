"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericsError -> 4.
"""


class LimkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LimkitError):
    """Invalid or inconsistent configuration."""


class DataError(LimkitError):
    """Malformed, insufficient, or inconsistent input data."""


class ParseError(DataError):
    """Structured file-parsing failure.

    Parameters
    ----------
    message : str
        Human-readable description.
    field : str
        Name of the offending header field or column.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{message} (field: {field})")
        self.field = field


class NumericsError(LimkitError):
    """Numerical failure: instability, divergence, or ill-conditioning."""


class ConditioningError(NumericsError):
    """A matrix required to be invertible is singular or near-singular."""


class InstabilityError(NumericsError):
    """An estimated or integrated system is unstable."""


class BranchAmbiguityError(NumericsError):
    """Matrix logarithm branch cannot be resolved from the sampled lag."""


class DivergenceError(NumericsError):
    """Training or integration produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step

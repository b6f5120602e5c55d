"""Exception taxonomy shared across the package.

The CLI maps these to exit codes: usage errors -> 1, data errors -> 2,
numeric errors -> 3.
"""


class BodyFitError(Exception):
    """Base class for all bodyfit errors."""


class DimensionError(BodyFitError):
    """Shapes do not conform to an operation's shape rule."""


class ConfigurationError(BodyFitError):
    """Unknown primitive, bad config value, or missing configuration."""


class ContractViolationError(BodyFitError):
    """A documented precondition was violated by the caller."""


class NumericError(BodyFitError):
    """Non-finite values or degenerate numeric input."""


class DataError(BodyFitError):
    """Malformed or inconsistent input data."""


class ModelValidationError(DataError):
    """Body-model container failed its load-time invariants."""


class AlignmentError(DataError):
    """Procrustes alignment has too few or degenerate correspondences."""


class StagingError(ConfigurationError):
    """A training stage is missing its prerequisite checkpoint."""


class UsageError(BodyFitError):
    """Invalid command-line flags or paths."""

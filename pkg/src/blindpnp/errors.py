"""Exception hierarchy shared across the package."""


class BlindPnPError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BlindPnPError, ValueError):
    """An argument violates a documented precondition (shape, range, finiteness)."""


class BehindCameraError(BlindPnPError):
    """A point has non-positive depth under the given pose."""


class DegenerateGeometryError(BlindPnPError):
    """Geometric configuration is rank-deficient or otherwise unusable."""


class NoSolutionError(BlindPnPError):
    """A minimal solver found no admissible solution."""


class NumericFailureError(BlindPnPError):
    """Non-finite values or fatal under/overflow in a numeric routine."""


class ContractViolationError(BlindPnPError):
    """An API was called out of order (e.g. backward before forward)."""


class GenerationFailureError(BlindPnPError):
    """Synthetic scene generation failed after bounded retries."""


class ConfigurationError(BlindPnPError):
    """An experiment/CLI configuration is unusable (missing paths, bad fields)."""

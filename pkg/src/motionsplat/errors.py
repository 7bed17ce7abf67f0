"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit with 3,
optimization divergence with 4.
"""


class MotionSplatError(Exception):
    """Base class for all package errors."""


class ValidationError(MotionSplatError, ValueError):
    """Input data violates a documented invariant or file schema."""


class ParseError(ValidationError):
    """A file could not be parsed; the message names the offending field."""


class BranchAmbiguityError(MotionSplatError, ValueError):
    """Logarithm requested for a rotation at (or too close to) pi."""


class BehindCameraError(MotionSplatError, ValueError):
    """A point has non-positive depth in the camera frame."""


class ContractError(MotionSplatError, RuntimeError):
    """An API was used out of order (e.g. backward without forward)."""


class DivergenceError(MotionSplatError, RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message, state_path=None):
        super().__init__(message)
        self.state_path = state_path

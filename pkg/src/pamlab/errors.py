"""Exception hierarchy shared by every module.

The CLI maps :class:`DomainError` to exit code 1 and
:class:`CertificationError` / :class:`ConvergenceError` to exit code 2.
"""


class PamError(Exception):
    """Base class for all errors raised by pamlab."""


class DomainError(PamError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InsufficientSitesError(DomainError):
    """Fewer than two admissible sites are available for order statistics."""


class BoxTooLargeError(DomainError):
    """A dense computation was requested on a box above its size limit."""


class CoordinateRangeError(DomainError):
    """A lattice coordinate does not fit the fixed-width hash packing."""


class CertificationError(PamError, RuntimeError):
    """The argmax search could not certify its result within its budget."""

    def __init__(self, message, required_radius=None):
        super().__init__(message)
        self.required_radius = required_radius


class ConvergenceError(PamError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotApplicable(PamError):
    """A bound's preconditions do not hold for the given input.

    This is a signal about the instance, not a fault of the field.
    """

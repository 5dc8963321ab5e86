"""Exception hierarchy.

Domain errors (violated mathematical preconditions) derive from
:class:`DomainError`; malformed files and inputs derive from
:class:`DataFormatError`. The CLI maps the first family to exit status 1
and the second to exit status 2.
"""


class DomainError(ValueError):
    """A mathematical precondition of an operation does not hold."""


class DimensionError(DomainError):
    pass


class UnitCircleError(DomainError):
    """An eigenvalue of ``A`` lies (numerically) on the unit circle."""


class DegenerateHorizonError(DomainError):
    pass


class ConditioningError(DomainError):
    """A Gram or cross-Gram matrix is numerically singular."""

    def __init__(self, message, sigma_min=None):
        super().__init__(message)
        self.sigma_min = sigma_min


class WeakInstrumentError(ConditioningError):
    pass


class InstabilityError(DomainError):
    """Simulated state norm exceeded the overflow guard."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class StabilizabilityError(DomainError):
    pass


class RankError(DomainError):
    def __init__(self, message, singular_values=None):
        super().__init__(message)
        self.singular_values = singular_values


class RealizationError(DomainError):
    pass


class UnsupportedError(DomainError):
    pass


class DataFormatError(ValueError):
    """Input file or array does not match the expected schema."""

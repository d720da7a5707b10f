"""Exception hierarchy shared by all workbench modules."""


class WorkbenchError(Exception):
    """Base class for every error raised by nvwb."""


class ValidationError(WorkbenchError, ValueError):
    """Input violates a documented invariant."""


class InvalidRateError(ValidationError):
    pass


class NumericError(WorkbenchError, ArithmeticError):
    pass


class NonUniqueSteadyStateError(WorkbenchError):
    pass


class OutOfRangeError(ValidationError):
    pass


class ZeroReferenceError(WorkbenchError, ZeroDivisionError):
    """Reference fluorescence integrates to zero (no pumping)."""


class FitError(WorkbenchError):
    pass


class RankDeficiencyError(FitError):
    pass


class InitError(FitError):
    pass


class DegenerateTableError(ValidationError):
    pass


class PreconditionError(WorkbenchError):
    pass


class SpecError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class DegenerateImageError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass

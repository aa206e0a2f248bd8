"""Exception and warning types raised across the package."""


class SBError(Exception):
    """Base class for all package errors."""


class MissingDensity(SBError):
    """The model has no analytic quantity registered for the requested operation."""


class TimeAtTerminal(SBError):
    """A bridge drift was requested at or beyond the terminal time."""


class GridMismatch(SBError):
    pass


class SizeCapExceeded(SBError):
    pass


class OffSupport(SBError):
    """A point is not an atom of the discrete marginal."""


class SingularDiffusion(SBError):
    pass


class NonAbsolutelyContinuous(SBError):
    pass


class DegenerateSample(SBError):
    """All importance weight sits on (almost) a single sample."""


class BudgetExceeded(SBError):
    """Control energy is above the allowed budget."""


class ConfigError(SBError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalFailure(SBError):
    pass


class NoConvergenceWarning(RuntimeWarning):
    pass


class DomainExitWarning(RuntimeWarning):
    pass


class LowEffectiveSampleSize(RuntimeWarning):
    pass

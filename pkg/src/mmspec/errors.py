"""Exception hierarchy shared by all modules."""


class MMSpecError(Exception):
    """Base class for every error raised by :mod:`mmspec`."""


class ValidationError(MMSpecError, ValueError):
    """Raw input data failed validation."""


class NonProbabilityMeasure(ValidationError):
    pass


class MetricViolation(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class InvalidParameter(MMSpecError, ValueError):
    pass


class SpaceMismatch(MMSpecError, ValueError):
    pass


class DimensionMismatch(MMSpecError, ValueError):
    pass


class SolverFailure(MMSpecError, RuntimeError):
    pass


class IllPosed(MMSpecError, ValueError):
    """The resolvent of a semiconvex functional is not defined at this step size."""


class OutsideDomain(MMSpecError, ValueError):
    pass


class InvarianceBroken(MMSpecError, RuntimeError):
    """The discrete sphere flow drifted off the unit sphere by more than allowed."""


class NoConvergence(MMSpecError, RuntimeError):
    """An iteration cap was hit; ``best`` holds the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NotOrthonormal(MMSpecError, ValueError):
    pass


class InvalidK(MMSpecError, ValueError):
    pass


class NotQuadratic(MMSpecError, TypeError):
    pass


class EmptySet(MMSpecError, ValueError):
    pass


class NormCollapse(MMSpecError, RuntimeError):
    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(indices)


class Unbounded(MMSpecError, ValueError):
    pass

"""Exception hierarchy shared by all modules."""


class MetaReflectError(Exception):
    """Base class for every error raised by the package."""


class NotOnBoundary(MetaReflectError):
    pass


class ProjectionDiverged(MetaReflectError):
    pass


class OutsideDomain(MetaReflectError):
    pass


class StepRejected(MetaReflectError):
    pass


class NoConvergence(MetaReflectError):
    pass


class ChainEmpty(MetaReflectError):
    pass


class DegenerateSegment(MetaReflectError):
    pass


class TooFar(MetaReflectError):
    pass


class NoDescent(MetaReflectError):
    pass


class NoFeasiblePath(MetaReflectError):
    pass


class UnreachableTarget(MetaReflectError):
    pass


class TooLarge(MetaReflectError):
    pass


class NonGenericTie(MetaReflectError):
    pass


class AtBreakpoint(MetaReflectError):
    pass


class InconsistentMatrix(MetaReflectError):
    pass


class CFLViolation(MetaReflectError):
    pass


class HorizonInfeasible(MetaReflectError):
    pass


class SimulationFailed(MetaReflectError):
    pass


class ConfigInvalid(MetaReflectError):
    """Raised on malformed configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key

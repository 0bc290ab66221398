"""Exception hierarchy shared across the toolkit."""


class RaylensError(Exception):
    """Base class for all raylens errors."""


class DomainError(RaylensError):
    """A differentiable primitive was evaluated outside its domain."""


class TapeStateError(RaylensError):
    """Misuse of a tape: stale handle, double backward, or record after backward."""


class DegenerateTraceError(RaylensError):
    """Too few valid rays survived tracing to compute a loss or statistic."""


class DegeneratePsfError(RaylensError):
    """A point-spread grid received zero valid rays."""


class ChiefRayError(RaylensError):
    """The chief-ray solve failed to converge."""


class LensFileError(RaylensError):
    """A lens prescription file is malformed or violates system invariants."""

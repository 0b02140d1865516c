"""Exception types shared across the package."""


class FuseoptError(Exception):
    """Base class for all package errors."""


class CycleError(FuseoptError):
    """The contracted or scheduling dependency graph contains a cycle."""


class MissingCost(FuseoptError):
    """A group or bucket has no duration available."""


class NotNeighbors(FuseoptError):
    """Attempted AllReduce fusion between non-neighboring buckets."""


class UnknownOp(FuseoptError, KeyError):
    """Profile lookup missed; callers must fall back or fail loudly."""


class DegenerateSamples(FuseoptError):
    """Too few or collinear samples for a regression fit."""


class BadTopology(FuseoptError):
    """Ring formula called with fewer than 2 devices or non-positive bandwidth."""


class DimensionMismatch(FuseoptError):
    """Model parameters and feature dimensions disagree."""


class NonPositiveTime(FuseoptError):
    """A time that must be strictly positive was zero or negative."""


class Divergence(FuseoptError):
    """Training produced a non-finite validation loss."""


class LimitExceeded(FuseoptError):
    """Exhaustive enumeration was asked for an instance above its size limits."""


class InvalidConfig(FuseoptError):
    """Search or training configuration violates its invariants."""


class GraphFormatError(FuseoptError, ValueError):
    """A graph/profile/model document does not match the expected schema."""

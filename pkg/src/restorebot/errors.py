"""Exception types raised across the pipeline."""


class RestoreBotError(Exception):
    """Base class for all pipeline errors."""


class NonConvergence(RestoreBotError):
    """Vincenty iteration failed to converge (nearly antipodal points)."""


class OutOfRange(RestoreBotError):
    """Point lies outside the validity radius of a local frame."""


class EmptyMask(RestoreBotError):
    pass


class OutOfImage(RestoreBotError):
    pass


class NoGroundIntersection(RestoreBotError):
    pass


class NoHit(RestoreBotError):
    pass


class NoAnchors(RestoreBotError):
    pass


class InsufficientAnchors(RestoreBotError):
    pass


class NonMonotonicTime(RestoreBotError):
    pass


class InvalidConfig(RestoreBotError):
    pass


class UnknownInstance(RestoreBotError):
    pass


class SchemaError(RestoreBotError):
    """An artifact file violates its schema or has an unsupported version."""


class EmptySession(RestoreBotError):
    """A session produced no usable frames or observations."""

"""Exception hierarchy shared across the package."""


class StreamKVError(Exception):
    """Base class for all errors raised by streamkv."""


class DimensionError(StreamKVError, ValueError):
    """Array shapes or vector lengths disagree."""


class GeometryError(StreamKVError, ValueError):
    """Token counts do not line up with the frame geometry."""


class ConfigError(StreamKVError, ValueError):
    """A configuration invariant is violated."""


class DomainError(StreamKVError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class StateError(StreamKVError, RuntimeError):
    """An operation was called in an engine state that does not allow it."""


class TraceError(StreamKVError):
    """Base class for KVTR trace problems."""


class TraceFormatError(TraceError, ValueError):
    """The file is not a KVTR trace (bad magic or malformed header)."""


class TraceVersionError(TraceError, ValueError):
    """The trace declares a version this reader does not support."""


class TraceCorruptionError(TraceError, ValueError):
    """The payload length disagrees with the header arithmetic."""

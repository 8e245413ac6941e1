"""Exception hierarchy shared across the package."""


class StibError(Exception):
    """Base class for all errors raised by stib."""


class SignalFormatError(StibError, ValueError):
    """A signal file could not be decoded.

    ``offset`` is a byte offset for stb files and a zero-based row number
    for csv files.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class MalformedHeaderError(SignalFormatError):
    pass


class TruncatedPayloadError(SignalFormatError):
    pass


class NonFiniteValueError(SignalFormatError):
    pass


class DimensionMismatchError(SignalFormatError):
    pass


class GraphError(StibError, ValueError):
    pass


class TooFewEntriesError(StibError, ValueError):
    """The signal is too short for the requested window lengths."""

    def __init__(self, entries, minimum):
        super().__init__(f"signal has {entries} entries, need at least {minimum}")
        self.entries = entries
        self.minimum = minimum


class ZeroVarianceError(StibError, ValueError):
    pass


class AllocationError(StibError, MemoryError):
    """A pipeline-owned allocation could not be satisfied."""

    def __init__(self, requested_bytes, reason=""):
        msg = f"cannot allocate {requested_bytes} bytes"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.requested_bytes = requested_bytes


class ShapeError(StibError, ValueError):
    pass


class ConfigError(StibError, ValueError):
    pass


class NonFiniteError(StibError, FloatingPointError):
    pass

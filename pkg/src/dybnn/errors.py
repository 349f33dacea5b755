"""Exception hierarchy shared by every dybnn module."""


class DybnnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(DybnnError, ValueError):
    pass


class NonBinaryInput(DybnnError, ValueError):
    pass


class NonFiniteInput(DybnnError, ValueError):
    pass


class EmptySpatial(DybnnError, ValueError):
    pass


class StaleState(DybnnError, RuntimeError):
    """A backward call received a cache that does not match its forward."""


class PaddingOverflow(DybnnError, ValueError):
    pass


class InvalidConfig(DybnnError, ValueError):
    """Configuration error; ``path`` locates the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class FormatError(DybnnError, ValueError):
    """Malformed model file; ``chunk`` names the chunk being read."""

    def __init__(self, chunk, message):
        self.chunk = chunk
        super().__init__(f"chunk {chunk!r}: {message}")


class VersionError(DybnnError, ValueError):
    pass


class NonFiniteLoss(DybnnError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class DataError(DybnnError, ValueError):
    """Base for dataset ingestion problems."""


class MagicMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class RecordSizeMismatch(DataError):
    pass

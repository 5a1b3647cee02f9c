class MMLossError(Exception):
    pass


class ShapeError(MMLossError, ValueError):
    pass


class LabelError(MMLossError, ValueError):
    pass


class ConfigError(MMLossError, ValueError):
    pass


class DataError(MMLossError, ValueError):
    pass


class ProtocolError(DataError):
    """An evaluation protocol cannot be built or run on the given data."""


class DivergenceError(MMLossError, RuntimeError):
    """Training produced a non-finite loss.

    ``snapshot`` carries the state captured right before the failing step so
    callers can persist it for post-mortem inspection.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot

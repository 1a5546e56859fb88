"""Exception hierarchy shared by every module."""


class ErgostopError(Exception):
    """Base class for all package errors."""


class InvalidModelError(ErgostopError, ValueError):
    pass


class ErgodicityError(ErgostopError):
    pass


class DimensionError(ErgostopError, ValueError):
    pass


class InvalidRegionError(ErgostopError, ValueError):
    pass


class InsufficientDataError(ErgostopError):
    pass


class StepSizeError(ErgostopError, ValueError):
    pass


class ParameterError(ErgostopError, ValueError):
    pass


class SolverError(ErgostopError):
    pass


class NotApplicableError(ErgostopError):
    pass


class ConfigError(ErgostopError):
    """Bad run configuration. ``position`` is the 0-based offset for parse errors."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position

"""Exception types raised across the package."""


class PneutiltError(Exception):
    """Base class for all package errors."""


class TiltOutOfRange(PneutiltError, ValueError):
    pass


class PressureOutOfRange(PneutiltError, ValueError):
    pass


class NoConvergence(PneutiltError, RuntimeError):
    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


class InconsistentLengths(PneutiltError, ValueError):
    pass


class NoRootInRange(PneutiltError, ValueError):
    pass


class EmptyCloud(PneutiltError, ValueError):
    pass


class WorkspaceExhausted(PneutiltError, RuntimeError):
    pass


class RankDeficient(PneutiltError, ValueError):
    pass


class InsufficientLevels(PneutiltError, ValueError):
    pass


class ModelFormatError(PneutiltError, ValueError):
    pass


class CloudFormatError(PneutiltError, ValueError):
    pass


class ConfigError(PneutiltError, ValueError):
    """Invalid run configuration. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

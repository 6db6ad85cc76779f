"""Exception types raised across the package."""


class MKVError(Exception):
    """Base class for all package errors."""


class DegenerateInput(MKVError, ValueError):
    pass


class DimensionError(MKVError, ValueError):
    pass


class CapacityError(MKVError, RuntimeError):
    pass


class UnsupportedBenchmark(MKVError, ValueError):
    pass


class UnsupportedInput(MKVError, ValueError):
    pass


class DomainError(MKVError, ValueError):
    pass


class GridError(MKVError, ValueError):
    pass


class InvalidIntensity(MKVError, ValueError):
    pass


class TreeError(MKVError, RuntimeError):
    pass


class SchemeInconsistency(MKVError, RuntimeError):
    pass


class ComparisonError(MKVError, ValueError):
    pass


class NumericalBlowup(MKVError, FloatingPointError):
    """Non-finite state during integration; ``node`` is the offending step index."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ConfigError(MKVError, ValueError):
    """Invalid configuration; ``pointer`` is a JSON pointer to the bad entry."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


class TruncationWarning(UserWarning):
    """Too many Poisson paths hit the jump cap."""

"""Exception types shared across the package."""


class NslError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NslError):
    """Tensor shape or extent violates an operation's contract."""


class ConfigError(NslError):
    """Invalid configuration value or argument combination."""


class DataError(NslError):
    """Dataset files missing, malformed, or inconsistent with the manifest."""


class LossError(NslError):
    """Loss evaluation hit a degenerate input (e.g. zero denominator)."""


class TrainingError(NslError):
    """Training aborted (non-finite loss, empty split, bad schedule state)."""

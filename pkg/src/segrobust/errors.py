"""Exception hierarchy shared by every module of the package."""


class SegRobustError(Exception):
    """Base class for all structured errors raised by segrobust."""


class ShapeError(SegRobustError, ValueError):
    """Tensor or volume extents do not fit together."""


class ConfigError(SegRobustError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(SegRobustError, IOError):
    """A checkpoint, volume, or label file is malformed or truncated."""


class DivergenceError(SegRobustError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class UndefinedTestError(SegRobustError, ValueError):
    """A statistical test is undefined for the supplied data."""

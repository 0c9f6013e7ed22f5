"""Exception types raised across the package."""


class MrRegError(Exception):
    """Base class for all package errors."""


class ShapeError(MrRegError, ValueError):
    pass


class OddExtentError(ShapeError):
    """A spatial extent cannot be halved (or divided by 2**(K-1))."""


class DetachedTensorError(MrRegError, RuntimeError):
    """``backward`` was called on a tensor that is not part of a graph."""


class ZeroVarianceError(MrRegError, ValueError):
    pass


class EmptyMaskError(MrRegError, ValueError):
    pass


class DatasetTooSmall(MrRegError, ValueError):
    pass


class NonFiniteLossError(MrRegError, FloatingPointError):
    """Training produced a NaN/Inf loss.

    ``params`` holds the last parameters for which the loss was finite.
    """

    def __init__(self, message, params=None, epoch=None):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


class FormatError(MrRegError, ValueError):
    """A file could not be parsed. ``offset`` is the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset

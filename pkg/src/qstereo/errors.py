"""Exception types shared across the package."""


class QStereoError(Exception):
    """Base class for all package errors."""


class SizeError(QStereoError, ValueError):
    """Array has the wrong shape or a non-power-of-two transform size."""


class ShiftRangeError(QStereoError, ValueError):
    """Requested fractional shift exceeds the +/-1 pixel contract."""


class BoundaryError(QStereoError):
    """A tile or patch falls outside the source image."""


class DivergenceError(QStereoError, RuntimeError):
    """An iterative solver failed to converge."""


class DataError(QStereoError, ValueError):
    """Malformed input data (file contents, grids, configs)."""

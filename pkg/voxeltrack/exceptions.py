"""Custom exceptions."""


class VoxelTrackError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(VoxelTrackError, ValueError):
    """Raise when a configuration value or key is invalid."""


class InvalidGeometryError(VoxelTrackError, ValueError):
    """Raise when a box or region has non-positive or non-finite values."""


class OutOfRangeError(VoxelTrackError, ValueError):
    """Raise when a footprint lies fully outside the pseudo image grid."""


class ShapeError(VoxelTrackError, ValueError):
    """Raise when tensor shapes are incompatible."""


class NonFiniteError(VoxelTrackError, ArithmeticError):
    """Raise when a NaN or infinite value is found in a tensor."""


class BackwardError(VoxelTrackError, RuntimeError):
    """Raise when a backward pass is requested without a forward pass."""


class DataError(VoxelTrackError):
    """Raise when a data file is missing, unreadable or malformed."""


class CheckpointError(VoxelTrackError):
    """Raise when a checkpoint cannot be read or written."""

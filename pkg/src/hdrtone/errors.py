"""Exception types shared across the package."""


class HdrToneError(Exception):
    """Base class for errors raised by this package."""


class FormatError(HdrToneError):
    """Malformed or unsupported image file content."""


class DegenerateImageError(HdrToneError, ValueError):
    """Input image is constant (or otherwise unusable) where variation is required."""


class DimensionMismatchError(HdrToneError, ValueError):
    """Two inputs that must share a shape do not."""


class CheckpointError(HdrToneError):
    """Model checkpoint is missing, corrupt, or of the wrong kind."""


class TrainingDivergedError(HdrToneError):
    """Training produced a non-finite loss."""

"""Exception types shared across the toothprint package."""


class ToothprintError(Exception):
    """Base class for all toothprint errors."""


class GeometryOutOfBounds(ToothprintError):
    """Marker rectangle rounds outside the frame or to a zero-size region."""


class UnsupportedChannelCount(ToothprintError):
    """Image has a channel layout no operation is defined for."""


class ImageTooSmall(ToothprintError):
    """Image cannot be split into the requested tile grid."""


class ShapeMismatch(ToothprintError):
    """Array dimensions do not match what the model expects."""


class EmptyBatch(ToothprintError):
    """A loss was evaluated on zero samples."""


class BatchTooSmall(ToothprintError):
    """Batch statistics need at least two samples."""


class ZeroNormEmbedding(ToothprintError):
    """Embedding norm is too small to normalize."""


class NonFiniteGradient(ToothprintError):
    """A gradient tensor contains NaN or Inf entries."""


class DimensionMismatch(ToothprintError):
    """Two vectors being compared have different dimensions."""


class UnknownSubject(ToothprintError):
    """Subject id is not enrolled in the gallery."""


class EmptyDataset(ToothprintError):
    """Dataset root contains no usable subjects."""


class UnreadableImage(ToothprintError):
    """An image file exists but cannot be decoded."""


class TooFewSamples(ToothprintError):
    """A subject has fewer samples than the minimum required."""


class EmptyScores(ToothprintError):
    """Score-based metric evaluated on an empty genuine or imposter list."""

"""Exception types raised by the transfer pipeline."""


class TransferError(Exception):
    """Base class for all pipeline errors."""


class ImageError(TransferError):
    pass


class UnsupportedFormat(ImageError):
    """File is neither a PNG nor a binary PPM with maxval 255."""


class CorruptImage(ImageError):
    """Decoder failure, bad checksum, truncated payload or oversized image."""


class EmptyExample(TransferError, ValueError):
    pass


class DegenerateVariance(TransferError, ValueError):
    """A component variance fell below the configured floor."""


class ConfigInvalid(TransferError, ValueError):
    pass


class DimensionMismatch(TransferError, ValueError):
    pass


class ImageTooSmall(TransferError, ValueError):
    pass

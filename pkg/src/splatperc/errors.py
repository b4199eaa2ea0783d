"""Exception hierarchy.

Everything raised on purpose by this package derives from SplatpercError so
callers (and the CLI) can separate expected failures from bugs.
"""


class SplatpercError(Exception):
    """Base class for all package errors."""


class UnreadableFileError(SplatpercError):
    """File missing or not readable."""


class UnsupportedFormatError(SplatpercError):
    """File exists but is not a format we handle."""


class TruncatedPayloadError(SplatpercError):
    """File ended before the declared payload was complete."""


class ShapeMismatchError(SplatpercError):
    """Two rasters that must agree in shape do not."""


class BadMagicError(SplatpercError):
    """Checkpoint/bitstream does not start with the expected magic."""


class VersionMismatchError(SplatpercError):
    """Checkpoint/bitstream version is not supported."""


class CorruptStreamError(SplatpercError):
    """Entropy-coded payload failed to decode consistently."""


class DivergenceError(SplatpercError):
    """Training produced a non-finite loss.

    Carries the iteration index and, when the caller requested one, the path
    of the diagnostic state dump.
    """

    def __init__(self, message, iteration=None, dump_path=None):
        super().__init__(message)
        self.iteration = iteration
        self.dump_path = dump_path

"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PatchscopeError(Exception):
    exit_code = 1


class ConfigError(PatchscopeError, ValueError):
    """Invalid configuration: bad key, unsupported value, shape mismatch."""

    exit_code = 3


class DataError(PatchscopeError):
    """Problems with input files or manifests."""

    exit_code = 4


class MissingFileError(DataError, FileNotFoundError):
    exit_code = 5


class UnsupportedFormatError(DataError):
    exit_code = 6


class TruncatedFileError(DataError):
    exit_code = 6


class HeaderMismatchError(DataError):
    exit_code = 6


class NotAJpegError(UnsupportedFormatError):
    pass


class UnsupportedFeatureError(UnsupportedFormatError):
    """JPEG feature outside baseline sequential Huffman coding."""


class MetricUndefinedError(PatchscopeError, ValueError):
    exit_code = 7


class NumericalError(PatchscopeError, FloatingPointError):
    """A non-finite value appeared where only finite values are legal."""

    exit_code = 8

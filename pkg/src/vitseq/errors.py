"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: usage problems -> 1, data/format
problems -> 2, numeric failures -> 3.
"""


class VitSeqError(Exception):
    """Base class for all package errors."""


class ShapeError(VitSeqError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(VitSeqError):
    """Invalid or inconsistent configuration values."""


class DataError(VitSeqError):
    """Bad sample data: labels out of range, wrong slice counts, ..."""


class FormatError(VitSeqError):
    """A file does not conform to its declared on-disk format."""


class CorruptionError(FormatError):
    """A file parses but its payload is inconsistent with its header."""


class StorageError(VitSeqError):
    """I/O failure while persisting an artifact."""


class NumericError(VitSeqError):
    """Non-finite values where finite ones are required."""

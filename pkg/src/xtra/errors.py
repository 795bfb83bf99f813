"""Error taxonomy shared across the package.

Exit-code mapping lives in cli.py: configuration problems exit 2, data problems
exit 3, numeric problems exit 4.
"""


class XtraError(Exception):
    """Base class for all package errors."""


class ConfigError(XtraError):
    """Bad configuration: unknown keys, unparsable values, shape/layout mismatches."""


class DataError(XtraError):
    """Bad or missing data: files, datasets, buffers."""


class ValidationError(DataError):
    """Structurally malformed in-memory data (mismatched lengths, bad ranges)."""


class UnavailableError(DataError):
    """A resource exists but cannot serve the request (e.g. sampling an empty buffer)."""


class VersionError(DataError):
    """File magic or format version does not match what this code writes."""


class TruncatedError(DataError):
    """File ended before the declared payload was read."""


class ChecksumError(DataError):
    """Payload checksum mismatch."""


class NumericError(XtraError):
    """Non-finite value where a finite one is required."""

"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of two operands are incompatible."""


class NonFiniteError(ValueError):
    """A NaN or Inf showed up where only finite values are allowed."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class ConfigError(ValueError):
    """A run configuration is invalid (unknown variant, empty seed list, ...)."""


class EmptyBankError(ValueError):
    """An operation that needs at least one detection row got an empty bank."""


class OracleInvalidError(RuntimeError):
    """The function handed to the finite-difference checker is not deterministic."""


class FormatError(Exception):
    """Base class for on-disk feature-bank file problems."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File declares a format version this reader does not understand."""


class TruncatedFileError(FormatError):
    """File ends before the declared payload is complete."""


class TrailingDataError(FormatError):
    """File has bytes left over after the declared payload."""


class RecordFormatError(FormatError):
    """A record is dimensionally or semantically inconsistent with the header."""

"""Error types for the binary file formats used across the engine."""


class FileFormatError(Exception):
    """Base class for malformed feature, embedding, or parameter files."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes."""


class DimensionError(FileFormatError):
    """Header dimensions are zero, inconsistent, or exceed the size guard."""


class TruncatedFileError(FileFormatError):
    """File ends before the declared payload and checksum are complete."""


class ChecksumError(FileFormatError):
    """Trailing CRC32 does not match the preceding bytes."""


class PayloadError(FileFormatError):
    """Payload contains non-finite values."""


class VersionError(FileFormatError):
    """File declares an unsupported format version."""

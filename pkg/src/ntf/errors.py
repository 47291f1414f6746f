"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes, so every module raises one of
these rather than a bare ``ValueError``.
"""


class NTFError(Exception):
    """Base class for all package errors."""


class DimensionError(NTFError, ValueError):
    """Shapes or extents are incompatible with an operation."""


class ContractError(NTFError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(NTFError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ArgumentError(NTFError, ValueError):
    """An argument is outside its allowed range."""


class DataError(NTFError):
    """The dataset cannot satisfy a batch or split request."""


class MetricError(NTFError, ValueError):
    """A metric is undefined for the given examples."""


class ManifestError(NTFError, ValueError):
    """Base for manifest parsing problems."""


class ManifestParseError(ManifestError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class ManifestSchemaError(ManifestParseError):
    pass


class DuplicatePathError(ManifestParseError):
    pass


class ImageDecodeError(NTFError, ValueError):
    """Base for image decoding failures."""


class BadMagicError(ImageDecodeError):
    pass


class TruncatedImageError(ImageDecodeError):
    pass


class UnsupportedDepthError(ImageDecodeError):
    pass


class CheckpointError(NTFError):
    """Base for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class ConfigError(NTFError, ValueError):
    """Invalid run configuration (unknown key, bad value)."""

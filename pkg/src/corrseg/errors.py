"""Exception hierarchy shared by every stage of the pipeline.

Each class marks one failure category so callers (and the CLI exit-code
mapping) can react without string matching.
"""


class CorrsegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CorrsegError):
    """Run configuration is missing, malformed, or inconsistent."""


class FormatError(CorrsegError):
    """File does not carry the expected magic bytes or container layout."""


class UnsupportedVersionError(FormatError):
    """File declares a format version this build cannot read."""


class CorruptionError(CorrsegError):
    """Declared sizes disagree with the actual payload."""


class InvariantError(CorrsegError):
    """A domain-type invariant is violated (non-finite data, bad dims)."""


class ShapeError(CorrsegError):
    """Operands have incompatible dimensions."""


class DegenerateInputError(CorrsegError):
    """An input vector is too close to zero to normalize."""


class ParameterError(CorrsegError):
    """An operation parameter is outside its documented range."""


class DataError(CorrsegError):
    """Input data breaks its contract (unknown color, out-of-range label)."""


class NumericError(CorrsegError):
    """A non-finite value appeared where finite math was required."""


class ManifestError(CorrsegError):
    """Split manifest is missing files or fails validation."""


class DecodeError(CorrsegError):
    """A raster file could not be decoded."""


class WriteError(CorrsegError):
    """An output file could not be written."""


class EmptyInputError(CorrsegError):
    """An operation received no usable inputs."""


class UndefinedMetricsError(CorrsegError):
    """Metrics were requested over an empty confusion matrix."""

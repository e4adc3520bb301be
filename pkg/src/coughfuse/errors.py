"""Exception types raised across the pipeline."""


class CoughFuseError(Exception):
    """Base class for all package errors."""


class AudioFormatError(CoughFuseError, ValueError):
    """Unsupported or malformed audio file."""


class ManifestError(CoughFuseError, ValueError):
    """Malformed dataset manifest."""


class ShapeError(CoughFuseError, ValueError):
    """Array shapes do not agree with an operation's contract."""


class NonFiniteError(CoughFuseError, FloatingPointError):
    """A NaN or infinity appeared in a forward or backward pass."""


class CheckpointError(CoughFuseError, ValueError):
    """Checkpoint file is corrupt, of the wrong kind, or references stale members."""


class ConfigError(CoughFuseError, ValueError):
    """Configuration text could not be parsed."""

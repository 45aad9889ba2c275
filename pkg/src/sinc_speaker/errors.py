"""Exception hierarchy for sinc-speaker.

Every error raised by the library derives from ``SincSpeakerError``. The CLI
maps the three families onto exit codes: configuration problems exit with 1,
data problems with 2 and numeric failures with 3.
"""

from typing import Optional


class SincSpeakerError(Exception):
    """Base class for all sinc-speaker errors."""


class ConfigError(SincSpeakerError, ValueError):
    """Invalid configuration key, value or combination."""


class DataError(SincSpeakerError, ValueError):
    """Input data that cannot be used as given."""


class ShapeError(DataError):
    """Array dimensions that do not fit an operation."""


class AudioFormatError(DataError):
    """File is not a readable RIFF/WAVE file."""


class ChannelCountError(DataError):
    """Audio has more than one channel."""


class UnsupportedCodecError(DataError):
    """WAV subtype other than 16-bit PCM or 32-bit float."""


class ManifestError(DataError):
    """Corpus or manifest that violates the manifest contract."""


class CheckpointError(DataError):
    """Checkpoint file that cannot be loaded."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or corrupted content."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ends before its declared content."""


class CheckpointPayloadError(CheckpointError):
    """Checkpoint arrays contain NaN or Inf."""


class ClassCountMismatchError(CheckpointError):
    """Checkpoint head size differs from the class count in use."""


class NumericError(SincSpeakerError, ArithmeticError):
    """Numeric failure during computation."""


class NonFiniteError(NumericError):
    """NaN or Inf found in an array that must be finite."""

    def __init__(self, name: str, batch_index: Optional[int] = None):
        self.name = name
        self.batch_index = batch_index
        where = f" at batch {batch_index}" if batch_index is not None else ""
        super().__init__(f"Non-finite values in '{name}'{where}")


class ZeroNormError(NumericError):
    """Vector with zero norm where a direction is required."""

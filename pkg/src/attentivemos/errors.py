"""Exception hierarchy shared by every subpackage."""


class AttentiveMOSError(Exception):
    """Base class for all errors raised by attentivemos."""


class ShapeError(AttentiveMOSError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(AttentiveMOSError, ValueError):
    """A configuration violates a structural rule (divisibility, ranges, ...)."""


class NonFiniteError(AttentiveMOSError, FloatingPointError):
    """A NaN or Inf appeared at an op boundary while finite checks are on."""


class DegenerateRowError(AttentiveMOSError, ValueError):
    """A softmax row has every position masked out."""


class WavError(AttentiveMOSError, OSError):
    """A WAV file is malformed or in an unsupported layout."""


class ManifestError(AttentiveMOSError, ValueError):
    """A manifest row could not be parsed or failed validation."""


class CheckpointError(AttentiveMOSError, ValueError):
    """A checkpoint is corrupt or does not match the expected configuration."""


class LabelQualityError(AttentiveMOSError, ValueError):
    """The variance-weighted loss was requested for data without rating std."""


class ScheduleError(AttentiveMOSError, ValueError):
    """Self-teaching weights are negative or do not sum to one."""


class TrainingError(AttentiveMOSError, RuntimeError):
    """Training diverged (non-finite loss)."""

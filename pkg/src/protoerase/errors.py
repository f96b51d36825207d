"""Error types raised across the pipeline.

Every named failure mode gets its own class so callers (and the CLI) can
report the failing stage precisely instead of pattern-matching messages.
"""


class ProtoEraseError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(ProtoEraseError):
    """A config violates its type invariants (dimensions, counts, ranges)."""


class UnknownTokenError(ProtoEraseError):
    """A prompt references a token id outside the world vocabulary."""


class ZeroNormError(ProtoEraseError):
    """An operation that divides by a vector norm received a zero vector."""


class DimensionMismatchError(ProtoEraseError):
    """Operands disagree on embedding or latent dimensions."""


class InsufficientPointsError(ProtoEraseError):
    """Fewer points than requested clusters."""


class DuplicateEntryError(ProtoEraseError):
    """A prototype bank already contains the (concept, mode) pair."""


class VersionMismatchError(ProtoEraseError):
    """A serialized artifact carries an unsupported format_version."""


class CorruptFileError(ProtoEraseError):
    """A serialized artifact cannot be parsed or is missing fields."""


class InvariantViolationError(ProtoEraseError):
    """A loaded artifact fails revalidation of its declared invariants."""


class CalibrationError(ProtoEraseError):
    """Detector or threshold calibration could not reach its target rates."""


class StepUnderflowError(ProtoEraseError):
    """reverse_step called at t=0 (no steps remain)."""


class OptimizationError(ProtoEraseError):
    """Soft-prompt optimization hit a non-finite gradient or objective."""

"""Exception types shared across the toolkit.

Each category maps to one CLI exit code (see cli.EXIT_CODES).
"""


class MTAffectError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(MTAffectError, ValueError):
    """Bad values or preconditions (shapes, ranges, non-finite inputs)."""


class InputShapeError(ValidationError):
    """Input tensor dimensions do not match the model configuration."""


class DegenerateSampleError(ValidationError):
    """A sample carries no usable target for any task."""


class ManifestError(MTAffectError):
    """Malformed manifest or prediction file; carries row context."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class MergeError(MTAffectError):
    """Sample-id collision while merging manifests."""


class AlignmentError(MTAffectError):
    """Predictions and labels cannot be aligned by sample id."""


class CompletenessError(MTAffectError):
    """A missing (sample, task) pair was not covered by completed labels."""


class CheckpointError(MTAffectError):
    """Unreadable, incompatible, or version-mismatched checkpoint."""


class TrainingError(MTAffectError):
    """Non-finite loss or other unrecoverable optimization failure."""


class AnalysisError(MTAffectError):
    """Checkpoint structure does not admit the requested analysis."""


class ConfigError(MTAffectError):
    """Run-config parse failure; names the offending key and line."""

"""Exception types shared across the pipeline.

Every error carries a short machine-readable ``code`` that the CLI prints
alongside the human message.
"""


class PstrpError(Exception):
    code = "runtime"


class ConfigError(PstrpError):
    """Invalid, unknown, or inconsistent configuration. Maps to exit code 2."""

    code = "config"


class LayoutError(PstrpError):
    """Dataset root does not match the declared layout."""

    code = "layout_mismatch"

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class BoxesParseError(PstrpError):
    """Malformed detector boxes file."""

    code = "parse"


class ValidationError(PstrpError):
    """Data violates a documented invariant (shapes, ranges, label counts)."""

    code = "validation"


class CheckpointMismatchError(PstrpError):
    """Checkpoint preprocessing config disagrees with the requested run."""

    code = "checkpoint_mismatch"


class TrainingDivergedError(PstrpError):
    """A loss term became non-finite; the last written checkpoint is kept."""

    code = "diverged"


class EvaluationError(PstrpError):
    """Metric is undefined for the given inputs (e.g. single-class labels)."""

    code = "eval_undefined"

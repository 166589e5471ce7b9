"""Self-supervised video anomaly detection via patch-relation pretext tasks.

Pipeline stages: dataset ingestion -> ROI extraction and cube cropping ->
patch slicing/shuffling with relation targets -> two-stream transformer
training -> regularity scoring and frame-level AUROC evaluation.
"""

__version__ = "0.1.0"

from .errors import (
    BoxesParseError,
    CheckpointMismatchError,
    ConfigError,
    EvaluationError,
    LayoutError,
    PstrpError,
    TrainingDivergedError,
    ValidationError,
)

__all__ = [
    "__version__",
    "BoxesParseError",
    "CheckpointMismatchError",
    "ConfigError",
    "EvaluationError",
    "LayoutError",
    "PstrpError",
    "TrainingDivergedError",
    "ValidationError",
]

"""Exception hierarchy. Each class maps to a distinct CLI exit code."""


class LesionSynthError(Exception):
    """Base class for all package errors."""

    code = "error"


class GeometryMismatchError(LesionSynthError):
    code = "geometry-mismatch"


class InvalidTransformError(LesionSynthError):
    code = "invalid-transform"


class InvalidConfigError(LesionSynthError, ValueError):
    code = "invalid-config"


class EmptyInputError(LesionSynthError, ValueError):
    """A required mask or sample set is empty."""

    code = "empty-input"


class DegenerateRangeError(LesionSynthError, ValueError):
    code = "degenerate-range"


class InsufficientSampleError(LesionSynthError, ValueError):
    code = "insufficient-sample"


class EstimationFailedError(LesionSynthError):
    code = "estimation-failed"


class FillError(LesionSynthError):
    code = "fill-failed"


class TrainingDivergedError(LesionSynthError):
    code = "training-diverged"


class DegenerateLabelsError(LesionSynthError, ValueError):
    code = "degenerate-labels"


class PlacementError(LesionSynthError):
    code = "placement-failed"


class CheckpointError(LesionSynthError):
    code = "checkpoint"


class CorruptCheckpointError(CheckpointError):
    code = "corrupt-checkpoint"


class CheckpointVersionError(CheckpointError):
    code = "checkpoint-version"


class ConfigMismatchError(CheckpointError):
    code = "config-mismatch"


class MalformedImageError(LesionSynthError):
    code = "malformed-image"

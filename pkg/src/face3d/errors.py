"""Shared exception types."""


class DegenerateConfigurationError(ValueError):
    """Input geometry does not determine a solution (rank-deficient, collapsed scale, ...)."""


class GimbalLockError(DegenerateConfigurationError):
    """Euler decomposition is degenerate (pitch at +-pi/2)."""


class DegenerateGridError(DegenerateConfigurationError):
    """Pose-aligned sampling grid collapses (tangent plane seen edge-on)."""


class TrainingDivergedError(RuntimeError):
    """Optimization produced non-finite cost; lower the learning rate."""


class AnnotationFormatError(ValueError):
    """Malformed annotation file; carries the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line

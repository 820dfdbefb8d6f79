"""Exception types shared across the package."""


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap before meeting tolerance."""

    def __init__(self, message, iterations=None, estimate=None):
        super().__init__(message)
        self.iterations = iterations
        self.estimate = estimate


class SingularMatrixError(ValueError):
    """Linear solve met a pivot below threshold or an unusable residual."""


class CertificationError(RuntimeError):
    """A contraction certificate could not be produced or failed verification."""


class StateOverflowError(RuntimeError):
    """Simulated state exceeded the overflow threshold (divergence guard)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DataFormatError(ValueError):
    """A dataset file does not match its declared binary layout."""


class ConfigError(ValueError):
    """Experiment config is malformed, has unknown keys, or fails validation."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or from an unsupported version."""

"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class NumericsError(ArithmeticError):
    """A computation left the numerically trustworthy regime."""


class DegenerateGradientError(ValueError):
    """A guidance gradient is too small to normalize against."""


class SamplingDivergedError(RuntimeError):
    """A sampling trajectory produced non-finite values.

    Carries the step index and, when available, the partial run record so
    callers can persist diagnostics before aborting.
    """

    def __init__(self, message: str, step: int | None = None, record=None):
        super().__init__(message)
        self.step = step
        self.record = record


class CheckpointError(RuntimeError):
    """A checkpoint file is missing, malformed, or from an unknown format."""


class GraphExtractionError(ValueError):
    """A semantic-graph payload failed schema validation."""

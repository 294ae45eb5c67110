# rsn/errors.py
"""Exception types shared across the detection pipeline."""


class PipelineStageError(RuntimeError):
    """Raised when a pipeline stage fails; carries the stage label."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. recall with zero positives)."""


class MonotonicityError(RuntimeError):
    """Raised when a quantity expected to be non-increasing increases."""

"""
Exception hierarchy shared by the pipeline, the attack harness and the CLI.
"""

from typing import Optional


class WatermarkLabError(Exception):
    """Base class for every failure the lab reports on its own."""


class ConfigError(WatermarkLabError, ValueError):
    """Invalid or missing configuration. The message always names the field."""

    def __init__(self, field: str, message: str):
        self.field = field
        self.detail = message
        super().__init__(f"{field}: {message}")


class DatasetError(WatermarkLabError):
    """A dataset source is missing, empty or unreadable."""


class CheckpointError(WatermarkLabError):
    """A checkpoint file cannot be interpreted."""


class TrainingDivergedError(WatermarkLabError, RuntimeError):
    """The training loss became NaN or infinite."""


class ArtifactError(WatermarkLabError):
    """A run-directory artifact is missing or does not match its recorded hash."""

    def __init__(self, message: str, missing: Optional[list] = None):
        self.missing = missing or []
        super().__init__(message)


class PipelineStageError(WatermarkLabError, RuntimeError):
    """A pipeline stage failed; prior artifacts are left in place."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

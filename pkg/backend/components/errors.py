"""
Error types shared by every component.

ValidationError subclasses mean the caller handed us something unusable
(the CLI exits with 1). PipelineRuntimeError subclasses mean a model or
metric stage failed while running (the CLI exits with 2).
"""

from typing import List, Optional


class CocoDiffError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CocoDiffError):
    pass


class PipelineRuntimeError(CocoDiffError):
    pass


class ConfigError(ValidationError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class InvalidLocatorError(ValidationError):
    pass


class HookConfigurationError(ValidationError):
    pass


class ImageReadError(ValidationError):
    """An input image is missing or cannot be decoded."""


class ManifestError(ValidationError):
    """Raised once per manifest load with every offending entry listed."""

    def __init__(self, message: str, errors: Optional[List[str]] = None):
        self.errors = list(errors or [])
        details = "; ".join(self.errors)
        super().__init__(f"{message}: {details}" if details else message)


class CheckpointLoadError(PipelineRuntimeError):
    pass


class NonFiniteLatentError(PipelineRuntimeError):
    def __init__(self, message: str, timestep: Optional[int] = None):
        self.timestep = timestep
        super().__init__(message)


class GridSearchError(PipelineRuntimeError):
    pass


class FIDError(PipelineRuntimeError):
    pass


class AssetError(PipelineRuntimeError):
    pass


class StageError(PipelineRuntimeError):
    """Wraps a failure inside the fitting cycle with where it happened."""

    def __init__(self, stage: str, iteration: Optional[int], cause: Exception):
        self.stage = stage
        self.iteration = iteration
        self.cause = cause
        where = f"stage {stage}" if iteration is None else f"stage {stage}, iteration {iteration}"
        super().__init__(f"Fitting cycle failed at {where}: {cause}")

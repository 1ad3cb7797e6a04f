"""Exception types raised by the snell package."""

from typing import Optional


class SnellError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SnellError, ValueError):
    """An argument lies outside the range an operation supports."""


class ConfigError(SnellError, ValueError):
    """Configuration could not be read or failed validation."""


class TreeSizeError(SnellError, ValueError):
    """Exhaustive tree requested beyond the supported number of stages."""


class SamplerError(SnellError, RuntimeError):
    """Exit-time inversion failed to converge."""


class CalibrationError(SnellError, RuntimeError):
    """Kernel normalisation did not converge."""


class CouplingError(SnellError, RuntimeError):
    """A fine Brownian path ran out before the requested skeleton events."""


class ModelFileError(SnellError, ValueError):
    """Exported continuation models failed schema validation."""


class NumericError(SnellError, ArithmeticError):
    """Non-finite value produced while stepping a path."""

    def __init__(self, message: str, stage: Optional[int] = None):
        super().__init__(message)
        self.stage = stage


class ExperimentError(SnellError, RuntimeError):
    """Failure inside run_experiment, tagged with the stage that failed."""

    def __init__(self, message: str, stage_tag: str):
        super().__init__(f"[{stage_tag}] {message}")
        self.stage_tag = stage_tag

"""
Custom exceptions for the dual-pixel disparity pipeline.
Provides structured error handling throughout the application.

Every class carries an ``exit_code`` so the command line front end can map a
failure family to a distinct process exit status.
"""

from typing import Dict, Optional


class DPDisparityError(Exception):
    """Base exception for the dual-pixel disparity pipeline."""

    exit_code = 1


class ConfigurationError(DPDisparityError):
    """Raised when configuration or camera parameters are invalid."""

    exit_code = 2


class ValidationError(DPDisparityError):
    """Raised when input validation fails."""

    exit_code = 3


class FileOperationError(DPDisparityError):
    """Raised when reading or writing a map file fails."""

    exit_code = 4

    def __init__(self, path: str, message: str, original_error: Exception = None):
        self.path = str(path)
        self.original_error = original_error
        super().__init__(f"{self.path}: {message}")


class SimulationError(DPDisparityError):
    """Raised when the dual-pixel simulator cannot render a scene."""

    exit_code = 10


class MatchingError(DPDisparityError):
    """Raised when template matching cannot run."""

    exit_code = 11


class SolverError(DPDisparityError):
    """Raised when a smoothing or completion system cannot be solved."""

    exit_code = 12


class FitError(DPDisparityError):
    """Raised when the error model cannot be fitted."""

    exit_code = 13

    def __init__(self, message: str, iterations: Optional[int] = None):
        self.iterations = iterations
        super().__init__(message)


class EvaluationError(DPDisparityError):
    """Raised when metrics cannot be computed."""

    exit_code = 14


class StageError(DPDisparityError):
    """Raised when a pipeline stage fails; keeps the stage name and artifacts."""

    def __init__(self, stage: str, original_error: Exception, artifacts: Dict[str, str] = None):
        self.stage = stage
        self.original_error = original_error
        self.artifacts = dict(artifacts or {})
        self.exit_code = getattr(original_error, 'exit_code', DPDisparityError.exit_code)
        listed = ', '.join(f"{name}={path}" for name, path in sorted(self.artifacts.items()))
        suffix = f" [artifacts: {listed}]" if listed else ""
        super().__init__(f"Stage '{stage}' failed: {original_error}{suffix}")

"""
Validation utilities for pipeline inputs and error reporting.
Checks grids, paths and scalar parameters before any numerical stage runs and
turns failures into short, loggable messages.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Type

import numpy as np

from exceptions import DPDisparityError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class ValidationResult:
    """Result of a validation check with the normalized value and messages."""
    is_valid: bool
    value: Any = None
    warnings: List[str] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    def raise_if_invalid(self, error_class: Type[DPDisparityError] = ValidationError):
        """Raise ``error_class`` with the collected errors when invalid."""
        if not self.is_valid:
            raise error_class("; ".join(self.errors) or "invalid input")
        return self.value


class InputValidator:
    """Provides input validation for grids, files and numeric parameters."""

    MAX_DIMENSION = 32768  # Largest accepted image side in pixels
    MAP_SUFFIXES = ('.pfm', '.png')
    IMAGE_SUFFIXES = ('.pfm', '.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')

    @classmethod
    def validate_path(cls, path, must_exist: bool = True,
                      allowed_suffixes: Optional[Sequence[str]] = None) -> ValidationResult:
        """
        Validate a file path.

        Args:
            path: Path-like or string
            must_exist: Require the file to exist
            allowed_suffixes: Lower-case suffixes accepted, None for any

        Returns:
            ValidationResult holding a ``Path``
        """
        if path is None or str(path).strip() == "":
            return ValidationResult(False, errors=["Empty path not allowed"])

        resolved = Path(str(path)).expanduser()
        errors = []
        if allowed_suffixes and resolved.suffix.lower() not in allowed_suffixes:
            errors.append(f"Unsupported file type '{resolved.suffix}' for {resolved}. "
                          f"Expected one of: {', '.join(allowed_suffixes)}")
        if must_exist and not resolved.is_file():
            errors.append(f"File not found: {resolved}")

        return ValidationResult(not errors, resolved, errors=errors)

    @classmethod
    def validate_grid(cls, array, name: str = "grid", allow_nan: bool = False,
                      channels: Iterable[int] = (1, 3)) -> ValidationResult:
        """
        Validate a 2-D grid or a channel-last 3-D grid.

        Args:
            array: Array-like grid
            name: Name used in messages
            allow_nan: Accept non-finite samples (masked maps)
            channels: Accepted channel counts for 3-D input

        Returns:
            ValidationResult holding a float64 array
        """
        try:
            grid = np.asarray(array, dtype=np.float64)
        except (TypeError, ValueError):
            return ValidationResult(False, errors=[f"{name} is not numeric"])

        errors = []
        if grid.ndim == 3 and grid.shape[2] not in tuple(channels):
            errors.append(f"{name} has {grid.shape[2]} channels")
        elif grid.ndim not in (2, 3):
            errors.append(f"{name} must be 2-D or 3-D, got {grid.ndim}-D")
        elif min(grid.shape[:2]) < 1 or max(grid.shape[:2]) > cls.MAX_DIMENSION:
            errors.append(f"{name} has unsupported dimensions {grid.shape[:2]}")
        elif not allow_nan and not np.all(np.isfinite(grid)):
            errors.append(f"{name} contains non-finite samples")

        return ValidationResult(not errors, grid, errors=errors)

    @classmethod
    def validate_same_shape(cls, *named_arrays) -> ValidationResult:
        """Check that all ``(name, array)`` pairs share height and width."""
        shapes = {name: tuple(np.shape(array)[:2]) for name, array in named_arrays}
        if len(set(shapes.values())) > 1:
            listed = ", ".join(f"{name}={shape}" for name, shape in shapes.items())
            return ValidationResult(False, shapes, errors=[f"Dimension mismatch: {listed}"])
        return ValidationResult(True, shapes)

    @classmethod
    def validate_positive(cls, value, name: str, allow_zero: bool = False) -> ValidationResult:
        """Validate a finite positive scalar."""
        try:
            number = float(value)
        except (TypeError, ValueError):
            return ValidationResult(False, errors=[f"{name} must be a number"])
        if not math.isfinite(number) or number < 0 or (number == 0 and not allow_zero):
            bound = "non-negative" if allow_zero else "positive"
            return ValidationResult(False, number, errors=[f"{name} must be finite and {bound}, got {value}"])
        return ValidationResult(True, number)

    @classmethod
    def validate_odd(cls, value, name: str, minimum: int = 3) -> ValidationResult:
        """Validate an odd integer size of at least ``minimum``."""
        if isinstance(value, bool) or int(value) != value:
            return ValidationResult(False, errors=[f"{name} must be an integer"])
        size = int(value)
        if size < minimum or size % 2 == 0:
            return ValidationResult(False, size, errors=[f"{name} must be odd and >= {minimum}, got {size}"])
        return ValidationResult(True, size)


class SafeErrorHandler:
    """Turns pipeline errors into short user-facing messages and log records."""

    ERROR_MESSAGES = {
        'ConfigurationError': 'Invalid configuration. Check the camera and config files.',
        'ValidationError': 'Invalid input provided. Check map dimensions and values.',
        'FileOperationError': 'A map file could not be read or written.',
        'SimulationError': 'Dual-pixel simulation failed.',
        'MatchingError': 'Template matching failed.',
        'SolverError': 'Smoothing solver failed.',
        'FitError': 'Error model fit failed.',
        'EvaluationError': 'Metric evaluation failed.',
        'FileNotFoundError': 'A required file is missing.',
        'PermissionError': 'Access denied. Check file permissions.',
        'MemoryError': 'Not enough memory for this image size.',
    }

    MAX_LOGGED_MESSAGE = 300

    @classmethod
    def describe_error(cls, error: Exception, stage: str = "") -> str:
        """
        Create a short message for display.

        Args:
            error: The original exception
            stage: Pipeline stage where the error occurred

        Returns:
            Message safe for terminal display
        """
        base = cls.ERROR_MESSAGES.get(type(error).__name__, 'An error occurred while processing your request.')
        detail = str(error)[:cls.MAX_LOGGED_MESSAGE]
        prefix = f"{stage}: " if stage else ""
        return f"{prefix}{base} {detail}".strip()

    @classmethod
    def log_error(cls, error: Exception, stage: str = "", artifacts: Optional[Dict[str, str]] = None):
        """
        Log an error with its stage and the artifact paths involved.

        Args:
            error: The exception to log
            stage: Pipeline stage where the error occurred
            artifacts: Mapping of artifact names to paths
        """
        listed = ", ".join(f"{name}={path}" for name, path in sorted((artifacts or {}).items())) or "N/A"
        logger.error(
            f"Stage: {stage or 'unknown'} - "
            f"Type: {type(error).__name__} - "
            f"Artifacts: {listed} - "
            f"Error: {str(error)[:cls.MAX_LOGGED_MESSAGE]}"
        )

"""
Shared domain types for the dual-pixel disparity pipeline.
Holds camera parameters, map containers and the thin-lens conversion between
depth and dual-pixel disparity that every other module consumes.

Sign convention: disparity is positive on the far side of the focal plane
(z > z_f) and negative on the near side, exactly as the conversion formula
d = alpha * L * f / (1 - f / z_f) * (1 / z_f - 1 / z) produces it. The right
view is displaced by +d relative to the left view.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional

import numpy as np

from exceptions import ConfigurationError, ValidationError
from validation_utils import InputValidator

logger = logging.getLogger(__name__)

F_NUMBER_RTOL = 1e-9


@dataclass(frozen=True)
class CameraParams:
    """Thin-lens camera with a dual-pixel sensor.

    ``alpha`` is the proportionality constant that turns the signed blur size
    on the sensor into disparity in pixels; it is obtained by calibration.
    """
    focal_length: float  # meters
    f_number: float
    focus_distance: float  # meters
    alpha: float = 1.0
    aperture: Optional[float] = None  # meters, derived as f / F when omitted

    def __post_init__(self):
        if self.aperture is None:
            object.__setattr__(self, 'aperture', self.focal_length / self.f_number
                               if self.f_number else float('nan'))
        self.validate()

    def validate(self):
        """
        Check the camera invariants.

        Raises:
            ConfigurationError: If any parameter is out of range
        """
        for name in ('focal_length', 'f_number', 'aperture', 'alpha'):
            result = InputValidator.validate_positive(getattr(self, name), name)
            if not result.is_valid:
                raise ConfigurationError(result.errors[0])
        if not math.isfinite(self.focus_distance) or self.focus_distance <= self.focal_length:
            raise ConfigurationError(
                f"focus_distance ({self.focus_distance} m) must exceed focal_length "
                f"({self.focal_length} m)")
        if not math.isclose(self.f_number, self.focal_length / self.aperture, rel_tol=F_NUMBER_RTOL):
            raise ConfigurationError(
                f"f_number {self.f_number} disagrees with focal_length / aperture "
                f"= {self.focal_length / self.aperture}")

    @property
    def sensor_distance(self) -> float:
        """Lens-to-sensor distance f / (1 - f / z_f) in meters."""
        return self.focal_length / (1.0 - self.focal_length / self.focus_distance)

    @property
    def disparity_gain(self) -> float:
        """alpha * L * f / (1 - f / z_f): disparity per diopter of defocus."""
        return self.alpha * self.aperture * self.sensor_distance

    def with_alpha(self, alpha: float) -> 'CameraParams':
        """Return a copy with a different proportionality constant."""
        return CameraParams(self.focal_length, self.f_number, self.focus_distance, alpha)

    def to_dict(self) -> Dict[str, float]:
        """Serialize to the camera JSON layout."""
        return {
            'focal_length_m': self.focal_length,
            'f_number': self.f_number,
            'focus_distance_m': self.focus_distance,
            'alpha': self.alpha,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CameraParams':
        """
        Build camera parameters from the camera JSON layout.

        Args:
            data: Dict with focal_length_m, f_number, focus_distance_m, alpha

        Returns:
            Validated CameraParams

        Raises:
            ConfigurationError: If keys are missing or values invalid
        """
        required = ('focal_length_m', 'f_number', 'focus_distance_m')
        missing = [key for key in required if key not in data]
        if missing:
            raise ConfigurationError(f"Missing camera parameters: {', '.join(missing)}")
        try:
            return cls(float(data['focal_length_m']), float(data['f_number']),
                       float(data['focus_distance_m']), float(data.get('alpha', 1.0)))
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid camera parameter value: {e}")


@dataclass
class _MaskedMap:
    """Float grid plus an authoritative validity mask; invalid samples hold NaN."""
    values: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"{type(self).__name__} values must be 2-D, got shape {values.shape}")
        valid = np.isfinite(values) if self.valid is None else np.array(self.valid, dtype=bool)
        if valid.shape != values.shape:
            raise ValidationError(f"Validity mask shape {valid.shape} does not match values {values.shape}")
        valid &= np.isfinite(values)
        values[~valid] = np.nan
        self.values = values
        self.valid = valid

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def filled(self, fill_value: float = 0.0) -> np.ndarray:
        """Values with invalid samples replaced by ``fill_value``."""
        return np.where(self.valid, self.values, fill_value)

    def count_valid(self) -> int:
        return int(self.valid.sum())


@dataclass
class DepthMap(_MaskedMap):
    """Depth z in meters; valid samples are positive and finite."""

    def __post_init__(self):
        super().__post_init__()
        nonpositive = self.valid & ~(self.values > 0)
        if nonpositive.any():
            self.valid &= ~nonpositive
            self.values[nonpositive] = np.nan


@dataclass
class DisparityMap(_MaskedMap):
    """Signed disparity in pixels (sparse or dense)."""


@dataclass
class ConfidenceMap:
    """Per-pixel confidence clamped to [0, 1]."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"ConfidenceMap values must be 2-D, got shape {values.shape}")
        self.values = np.clip(np.nan_to_num(values, nan=0.0), 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def binarize(self, threshold: float = 0.5) -> 'ConfidenceMap':
        """Return a binary map with 1 where confidence >= threshold."""
        return ConfidenceMap((self.values >= threshold).astype(np.float64))

    def as_mask(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))


@dataclass
class DPImagePair:
    """Left/right dual-pixel views in [0, 1] with an optional guide image."""
    left: np.ndarray
    right: np.ndarray
    guide: Optional[np.ndarray] = None

    def __post_init__(self):
        self.left = InputValidator.validate_grid(self.left, "left", channels=()).raise_if_invalid()
        self.right = InputValidator.validate_grid(self.right, "right", channels=()).raise_if_invalid()
        named = [("left", self.left), ("right", self.right)]
        if self.guide is not None:
            self.guide = InputValidator.validate_grid(self.guide, "guide").raise_if_invalid()
            named.append(("guide", self.guide))
        InputValidator.validate_same_shape(*named).raise_if_invalid()

    @property
    def shape(self):
        return self.left.shape

    @property
    def reference(self) -> np.ndarray:
        """Guide for edge-aware weights: the RGB guide when present, else the left view."""
        return self.guide if self.guide is not None else self.left


def to_gray(image: np.ndarray) -> np.ndarray:
    """Average channels of a channel-last image; 2-D input is returned as float64."""
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=2) if image.ndim == 3 else image


def depth_to_disparity(depth: DepthMap, cam: CameraParams) -> DisparityMap:
    """
    Convert depth to dual-pixel disparity with the thin-lens relation.

    Args:
        depth: Depth map in meters
        cam: Camera parameters

    Returns:
        Disparity map in pixels; invalid depth stays invalid

    Raises:
        ConfigurationError: If the focus distance does not exceed the focal length
    """
    cam.validate()
    with np.errstate(divide='ignore', invalid='ignore'):
        values = cam.disparity_gain * (1.0 / cam.focus_distance - 1.0 / depth.values)
    return DisparityMap(values, depth.valid.copy())


def disparity_to_depth(disparity: DisparityMap, cam: CameraParams) -> DepthMap:
    """
    Invert the thin-lens relation; out-of-range disparities become invalid.

    Args:
        disparity: Disparity map in pixels
        cam: Camera parameters

    Returns:
        Depth map in meters
    """
    cam.validate()
    with np.errstate(divide='ignore', invalid='ignore'):
        inverse_depth = 1.0 / cam.focus_distance - disparity.values / cam.disparity_gain
        values = 1.0 / inverse_depth
    valid = disparity.valid & (inverse_depth > 0) & np.isfinite(values)
    return DepthMap(values, valid)


def disparity_limit(cam: CameraParams) -> float:
    """Disparity approached as depth goes to infinity."""
    return cam.disparity_gain / cam.focus_distance


def ordered_map(func: Callable, items: Iterable, threads: int = 1) -> List:
    """
    Apply ``func`` to every item and return results in input order.

    Results never depend on ``threads``: each task is independent and the
    output order is the input order.
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=int(threads)) as pool:
        return list(pool.map(func, items))

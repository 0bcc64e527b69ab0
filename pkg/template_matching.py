"""
SAD template matching between dual-pixel views.
Builds the reliable-texture mask from the left view and searches horizontal
shifts only, producing a sparse disparity map on the masked pixels.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List

import numpy as np
from scipy import ndimage

from disparity_core import ConfidenceMap, DisparityMap, DPImagePair, ordered_map, to_gray
from exceptions import ConfigurationError, MatchingError
from validation_utils import InputValidator

logger = logging.getLogger(__name__)

ZERO_COST = 1e-12


@dataclass
class MatchConfig:
    """Template matching parameters."""
    window: int = 27
    search_range: int = 25
    subpixel: bool = True
    lowpass_sigma: float = 1.5
    edge_threshold: float = 0.1

    def __post_init__(self):
        InputValidator.validate_odd(self.window, 'window', minimum=3).raise_if_invalid(ConfigurationError)
        if isinstance(self.search_range, bool) or int(self.search_range) != self.search_range \
                or self.search_range < 1:
            raise ConfigurationError(f"search_range must be an integer >= 1, got {self.search_range}")
        InputValidator.validate_positive(self.lowpass_sigma, 'lowpass_sigma', allow_zero=True).raise_if_invalid(
            ConfigurationError)
        InputValidator.validate_positive(self.edge_threshold, 'edge_threshold', allow_zero=True).raise_if_invalid(
            ConfigurationError)
        self.window = int(self.window)
        self.search_range = int(self.search_range)
        self.subpixel = bool(self.subpixel)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def shift_order(search_range: int) -> List[int]:
    """Shifts in tie-break order: 0, -1, 1, -2, 2, ..."""
    order = [0]
    for magnitude in range(1, search_range + 1):
        order.extend((-magnitude, magnitude))
    return order


def edge_magnitude(image: np.ndarray, lowpass_sigma: float = 1.5) -> np.ndarray:
    """Sobel gradient magnitude of the Gaussian-filtered image."""
    smoothed = to_gray(image)
    if lowpass_sigma > 0:
        smoothed = ndimage.gaussian_filter(smoothed, lowpass_sigma, mode='reflect')
    return np.hypot(ndimage.sobel(smoothed, axis=1, mode='reflect'),
                    ndimage.sobel(smoothed, axis=0, mode='reflect'))


def edge_mask(left: np.ndarray, cfg: MatchConfig = None) -> ConfidenceMap:
    """
    Binary mask of reliable texture in the left view.

    Args:
        left: Left DP view (gray or RGB)
        cfg: Matching configuration

    Returns:
        Binary ConfidenceMap, 1 where the gradient magnitude exceeds the threshold
    """
    cfg = cfg or MatchConfig()
    magnitude = edge_magnitude(left, cfg.lowpass_sigma)
    mask = magnitude > cfg.edge_threshold
    logger.debug(f"Edge mask covers {mask.mean():.1%} of the image")
    return ConfidenceMap(mask.astype(np.float64))


def _shift_cost(left: np.ndarray, right: np.ndarray, shift: int, window: int) -> np.ndarray:
    """Mean absolute difference between left(x) and right(x + shift) over the window overlap."""
    height, width = left.shape
    diff = np.zeros((height, width))
    overlap = np.zeros((height, width))
    if shift >= 0:
        span = slice(0, width - shift)
        diff[:, span] = np.abs(left[:, span] - right[:, shift:])
    else:
        span = slice(-shift, width)
        diff[:, span] = np.abs(left[:, span] - right[:, :width + shift])
    overlap[:, span] = 1.0

    total = ndimage.uniform_filter(diff, size=window, mode='constant')
    area = ndimage.uniform_filter(overlap, size=window, mode='constant')
    with np.errstate(divide='ignore', invalid='ignore'):
        cost = np.where(area > 1e-9, total / area, np.inf)
    return np.maximum(cost, 0.0)


def template_match(pair: DPImagePair, mask: ConfidenceMap, cfg: MatchConfig = None,
                   threads: int = 1) -> DisparityMap:
    """
    Horizontal SAD template matching on masked pixels.

    The disparity at x is the shift d minimizing the windowed mean of
    |left(x) - right(x + d)|. Ties go to the smallest |d|, negative first.

    Args:
        pair: DP image pair
        mask: Binary mask of pixels to match
        cfg: Matching configuration
        threads: Worker threads for the per-shift costs

    Returns:
        Sparse DisparityMap valid only on matched masked pixels

    Raises:
        MatchingError: If the window exceeds the image or dimensions differ
    """
    cfg = cfg or MatchConfig()
    left, right = to_gray(pair.left), to_gray(pair.right)
    height, width = left.shape
    if mask.shape != left.shape:
        raise MatchingError(f"Mask {mask.shape} does not match images {left.shape}")
    if cfg.window > height or cfg.window > width:
        raise MatchingError(f"Window {cfg.window} exceeds image size {width}x{height}")
    if not mask.is_binary():
        logger.warning("Matching mask is not binary; thresholding at 0.5")

    shifts = shift_order(cfg.search_range)
    costs = ordered_map(lambda s: _shift_cost(left, right, s, cfg.window), shifts, threads)
    by_shift = dict(zip(shifts, costs))

    best_cost = np.full((height, width), np.inf)
    best_shift = np.zeros((height, width), dtype=np.int64)
    for shift, cost in zip(shifts, costs):
        better = cost < best_cost
        best_cost[better] = cost[better]
        best_shift[better] = shift

    disparity = best_shift.astype(np.float64)
    if cfg.subpixel:
        disparity += _parabola_offsets(best_shift, best_cost, by_shift, cfg.search_range)

    valid = mask.as_mask() & np.isfinite(best_cost)
    logger.debug(f"Matched {int(valid.sum())} pixels over {len(shifts)} shifts")
    return DisparityMap(np.where(valid, disparity, np.nan), valid)


def _parabola_offsets(best_shift: np.ndarray, best_cost: np.ndarray, by_shift: Dict[int, np.ndarray],
                      search_range: int) -> np.ndarray:
    """Three-point parabola vertex offsets in [-0.5, 0.5]; zero at the search boundary or exact matches."""
    before = np.full(best_cost.shape, np.inf)
    after = np.full(best_cost.shape, np.inf)
    for shift in range(-search_range, search_range + 1):
        at = best_shift == shift
        if not at.any():
            continue
        if shift - 1 >= -search_range:
            before[at] = by_shift[shift - 1][at]
        if shift + 1 <= search_range:
            after[at] = by_shift[shift + 1][at]

    curvature = before - 2.0 * best_cost + after
    usable = np.isfinite(before) & np.isfinite(after) & (curvature > 0) & (best_cost > ZERO_COST)
    offsets = np.zeros(best_cost.shape)
    with np.errstate(divide='ignore', invalid='ignore'):
        offsets[usable] = 0.5 * (before[usable] - after[usable]) / curvature[usable]
    return np.clip(offsets, -0.5, 0.5)

"""
Physics-based dual-pixel simulator.
Renders left/right DP views from an image and a depth map by layered
depth-dependent convolution with half-shaded point spread functions, and
provides the random-dot chart used for matching experiments.

The shading is a linear ramp across the circle of confusion. For a far-side
point (z > z_f) the right kernel is weighted toward +x, so the right view is
displaced by +d relative to the left view; the ramp flips on the near side.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from disparity_core import (CameraParams, ConfidenceMap, DepthMap, DPImagePair, ordered_map, to_gray)
from exceptions import SimulationError, ValidationError
from template_matching import MatchConfig, template_match
from validation_utils import InputValidator

logger = logging.getLogger(__name__)

DEFAULT_PIXEL_PITCH = 4e-6  # meters per pixel
DEFAULT_MAX_RADIUS = 64.0  # pixels
DEFAULT_NUM_LAYERS = 16
DEFAULT_SUPERSAMPLE = 8
DELTA_RADIUS = 0.5
COVERAGE_FLOOR = 1e-9
DOT_SUPERSAMPLE = 32
CALIBRATION_RADII = (1.0, 2.5, 4.0, 5.5, 7.0, 8.5)  # pixels, used with both signs
CALIBRATION_CHART_SIZE = (192, 128)  # width, height
CALIBRATION_SEED = 20240
ALPHA_CALIBRATION_METHODS = ('matching', 'centroid')


@dataclass(frozen=True, eq=False)
class DPPsfPair:
    """Half-shaded PSF pair for one depth."""
    radius: float  # signed, pixels; positive on the far side
    left_kernel: np.ndarray
    right_kernel: np.ndarray

    @property
    def support(self) -> int:
        return self.left_kernel.shape[0]

    @property
    def is_delta(self) -> bool:
        return self.support == 1

    def centroid_separation(self) -> float:
        """Horizontal centroid of the right kernel minus that of the left kernel."""
        half = self.support // 2
        x = np.arange(-half, half + 1, dtype=np.float64)
        return float((self.right_kernel.sum(axis=0) * x).sum() - (self.left_kernel.sum(axis=0) * x).sum())


@dataclass
class SimulationConfig:
    """Rendering parameters for ``simulate_dp``."""
    pixel_pitch: float = DEFAULT_PIXEL_PITCH
    noise_sigma: float = 0.0
    num_layers: int = DEFAULT_NUM_LAYERS
    max_radius: float = DEFAULT_MAX_RADIUS
    supersample: int = DEFAULT_SUPERSAMPLE

    def __post_init__(self):
        for name in ('pixel_pitch', 'max_radius'):
            InputValidator.validate_positive(getattr(self, name), name).raise_if_invalid(SimulationError)
        InputValidator.validate_positive(self.noise_sigma, 'noise_sigma', allow_zero=True).raise_if_invalid(
            SimulationError)
        if int(self.num_layers) < 1 or int(self.supersample) < 1:
            raise SimulationError("num_layers and supersample must be at least 1")


def signed_coc_radius(z, cam: CameraParams, pixel_pitch: float = DEFAULT_PIXEL_PITCH):
    """
    Signed circle-of-confusion radius in pixels.

    The magnitude is L * f / (1 - f / z_f) * |1 / z_f - 1 / z| / (2 * pitch);
    the sign follows 1 / z_f - 1 / z, so it is positive behind the focal plane.
    """
    z = np.asarray(z, dtype=np.float64)
    return cam.aperture * cam.sensor_distance * (1.0 / cam.focus_distance - 1.0 / z) / (2.0 * pixel_pitch)


def make_psf_pair(z: float, cam: CameraParams, pixel_pitch: float = DEFAULT_PIXEL_PITCH,
                  max_radius: float = DEFAULT_MAX_RADIUS, supersample: int = DEFAULT_SUPERSAMPLE) -> DPPsfPair:
    """
    Build the left/right PSF pair for a point at depth ``z``.

    Args:
        z: Depth in meters
        cam: Camera parameters
        pixel_pitch: Sensor pixel pitch in meters
        max_radius: Largest accepted blur radius in pixels
        supersample: Sub-samples per pixel side used to integrate the disc

    Returns:
        DPPsfPair whose kernels are normalized and mirror images of each other

    Raises:
        SimulationError: If z is not positive or the radius exceeds ``max_radius``
    """
    if not (z > 0 and math.isfinite(z)):
        raise SimulationError(f"Depth must be positive and finite, got {z}")
    radius = float(signed_coc_radius(z, cam, pixel_pitch))
    return psf_pair_from_radius(radius, max_radius, supersample)


def psf_pair_from_radius(radius: float, max_radius: float = DEFAULT_MAX_RADIUS,
                         supersample: int = DEFAULT_SUPERSAMPLE) -> DPPsfPair:
    """Build a PSF pair directly from a signed radius in pixels."""
    magnitude = abs(radius)
    if magnitude > max_radius:
        raise SimulationError(f"Blur radius {magnitude:.2f} px exceeds the maximum support of {max_radius} px")
    if magnitude < DELTA_RADIUS:
        delta = np.ones((1, 1))
        return DPPsfPair(radius, delta, delta.copy())

    half = int(math.ceil(magnitude))
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    coords = (np.arange(-half, half + 1)[:, None] + offsets[None, :]).ravel()
    y, x = np.meshgrid(coords, coords, indexing='ij')
    inside = x ** 2 + y ** 2 <= magnitude ** 2
    ramp = np.where(inside, np.maximum(0.0, x / radius), 0.0)
    size = 2 * half + 1
    right = ramp.reshape(size, supersample, size, supersample).sum(axis=(1, 3))

    total = right.sum()
    if total <= 0:
        delta = np.ones((1, 1))
        return DPPsfPair(radius, delta, delta.copy())
    right /= total
    return DPPsfPair(radius, np.fliplr(right).copy(), right)


def analytic_alpha(pixel_pitch: float = DEFAULT_PIXEL_PITCH) -> float:
    """
    Proportionality constant of the continuous linear-ramp PSF.

    The centroid of a ramp-weighted half disc of radius r sits 3*pi*r/16 from
    its center, so the left/right separation is 3*pi*r/8 pixels.
    """
    return 3.0 * math.pi / (16.0 * pixel_pitch)


def calibrate_alpha(cam: CameraParams, pixel_pitch: float = DEFAULT_PIXEL_PITCH,
                    depths: Optional[Iterable[float]] = None,
                    supersample: int = DEFAULT_SUPERSAMPLE, max_radius: float = DEFAULT_MAX_RADIUS,
                    method: str = 'centroid', match_config: Optional[MatchConfig] = None) -> float:
    """
    Calibrate alpha against the simulator.

    ``'centroid'`` measures the centroid separation of each PSF pair.
    ``'matching'`` blurs a fixed random-dot chart with each PSF pair and takes
    the mean disparity the template matcher recovers, so simulated pairs
    matched with the same settings agree with the thin-lens disparity.
    Both fit the slope (through the origin) of the measured shift against the
    alpha = 1 disparity over blur radii on both sides of focus.

    Args:
        cam: Camera whose alpha is ignored
        pixel_pitch: Sensor pixel pitch in meters
        depths: Depths in meters; defaults to a spread of blur radii around the focus distance
        method: 'centroid' or 'matching'
        match_config: Matcher settings for the 'matching' method (window and subpixel are used)

    Returns:
        Calibrated alpha

    Raises:
        SimulationError: If the method is unknown or the depths produce no defocus
    """
    if method not in ALPHA_CALIBRATION_METHODS:
        raise SimulationError(f"Unknown alpha calibration method '{method}'; "
                              f"expected one of {ALPHA_CALIBRATION_METHODS}")
    if depths is None:
        magnitudes = CALIBRATION_RADII if method == 'matching' else tuple(np.linspace(2, 12, 6))
        radii = [-m for m in magnitudes] + list(magnitudes)
    else:
        radii = []
        for z in depths:
            InputValidator.validate_positive(z, 'depth').raise_if_invalid(ValidationError)
            radii.append(float(signed_coc_radius(float(z), cam, pixel_pitch)))

    if method == 'matching':
        cfg = match_config or MatchConfig()
        shifts = _matched_shifts(tuple(radii), cfg.window, cfg.subpixel, supersample, max_radius)
    else:
        shifts = [psf_pair_from_radius(r, max_radius, supersample).centroid_separation() for r in radii]
    # The alpha = 1 disparity of a blur radius r is 2 * pitch * r
    unit_disparities = 2.0 * pixel_pitch * np.asarray(radii)
    shifts = np.asarray(shifts)

    denominator = float(unit_disparities @ unit_disparities)
    if denominator <= 0:
        raise SimulationError("Calibration depths produce no defocus")
    alpha = float(unit_disparities @ shifts) / denominator
    logger.debug(f"Calibrated alpha={alpha:.6g} by {method} (analytic {analytic_alpha(pixel_pitch):.6g})")
    return alpha


@lru_cache(maxsize=16)
def _matched_shifts(radii: Tuple[float, ...], window: int, subpixel: bool,
                    supersample: int, max_radius: float) -> Tuple[float, ...]:
    width, height = CALIBRATION_CHART_SIZE
    chart = render_random_dot_chart(width, height, 0.25, CALIBRATION_SEED)
    reach = int(math.ceil(max(abs(r) for r in radii) * 3.0 * math.pi / 8.0 * 1.25)) + 2
    border = window // 2 + reach
    if 2 * border >= min(width, height):
        raise SimulationError(f"Calibration chart {width}x{height} is too small for window {window} "
                              f"and blur radius {max(abs(r) for r in radii):.3g}")
    mask = np.zeros((height, width))
    mask[border:-border, border:-border] = 1.0
    cfg = MatchConfig(window=window, search_range=reach, subpixel=subpixel)

    shifts = []
    for radius in radii:
        pair = psf_pair_from_radius(radius, max_radius, supersample)
        views = DPImagePair(_blur(chart, pair.left_kernel), _blur(chart, pair.right_kernel))
        matched = template_match(views, ConfidenceMap(mask), cfg)
        if not matched.valid.any():
            raise SimulationError(f"No matches on the calibration chart at blur radius {radius:.3g}")
        shifts.append(float(np.mean(matched.values[matched.valid])))
    return tuple(shifts)


def _blur(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    if kernel.shape[0] == 1:
        return plane * kernel[0, 0]
    pad = kernel.shape[0] // 2
    padded = np.pad(plane, pad, mode='reflect')
    return fftconvolve(padded, kernel, mode='valid')


def _composite(layers, shape) -> np.ndarray:
    """
    Back-to-front "over" compositing of premultiplied layers.

    Coverage is composited alongside the color and divided out at the end,
    so pixels where a blurred occluder only partly covers a background whose
    own coverage was cut out are not darkened.
    """
    color = np.zeros(shape)
    coverage = np.zeros(shape)
    for layer_color, layer_alpha in layers:
        alpha = np.clip(layer_alpha, 0.0, 1.0)
        color = color * (1.0 - alpha) + layer_color
        coverage = coverage * (1.0 - alpha) + alpha
    return np.where(coverage > COVERAGE_FLOOR, color / np.maximum(coverage, COVERAGE_FLOOR), 0.0)


def quantize_depth_layers(depth: DepthMap, cam: CameraParams, num_layers: int = DEFAULT_NUM_LAYERS):
    """
    Split the depth map into layers of equal inverse-depth width.

    Invalid depth pixels are rendered in focus.

    Returns:
        (labels, layer_depths) with labels indexing layer_depths; layers are
        ordered far to near
    """
    inverse = np.where(depth.valid, 1.0 / np.where(depth.valid, depth.values, 1.0), 1.0 / cam.focus_distance)
    low, high = float(inverse.min()), float(inverse.max())
    if high - low <= 1e-12 * max(abs(high), 1.0):
        return np.zeros(inverse.shape, dtype=np.int64), np.array([1.0 / float(inverse.mean())])

    edges = np.linspace(low, high, num_layers + 1)
    labels = np.clip(np.searchsorted(edges, inverse, side='right') - 1, 0, num_layers - 1)
    used = np.unique(labels)
    remap = np.zeros(num_layers, dtype=np.int64)
    remap[used] = np.arange(used.size)
    labels = remap[labels]
    layer_depths = np.array([1.0 / inverse[labels == k].mean() for k in range(used.size)])
    return labels, layer_depths


def simulate_dp(image: np.ndarray, depth: DepthMap, cam: CameraParams,
                config: Optional[SimulationConfig] = None, seed: Optional[int] = None,
                threads: int = 1) -> DPImagePair:
    """
    Render the left and right DP views of a scene.

    Depth is quantized into layers; each layer's intensity and coverage are
    blurred with the layer's PSF pair (mirror padding) and composited back to
    front, so nearer layers occlude farther ones. The composite is divided by
    the accumulated coverage, which keeps each view's total energy at the
    in-focus total up to mirror-padding effects at the frame border.

    Args:
        image: Gray or RGB image in [0, 1]
        depth: Depth map aligned with the image
        cam: Camera parameters
        config: Simulation configuration
        seed: Seed for the optional Gaussian read noise
        threads: Worker threads for per-layer convolution

    Returns:
        DPImagePair with the input image retained as guide

    Raises:
        SimulationError: On dimension mismatch or oversized blur
    """
    config = config or SimulationConfig()
    try:
        source = InputValidator.validate_grid(image, "image").raise_if_invalid()
    except ValidationError as e:
        raise SimulationError(str(e))
    if source.shape[:2] != depth.shape:
        raise SimulationError(f"Image {source.shape[:2]} and depth {depth.shape} dimensions differ")

    gray = to_gray(source)
    labels, layer_depths = quantize_depth_layers(depth, cam, int(config.num_layers))
    pairs = [make_psf_pair(float(z), cam, config.pixel_pitch, config.max_radius, int(config.supersample))
             for z in layer_depths]
    logger.debug(f"Simulating {len(pairs)} depth layers; max radius "
                 f"{max(abs(p.radius) for p in pairs):.2f} px")

    def render_layer(index):
        coverage = (labels == index).astype(np.float64)
        color = gray * coverage
        pair = pairs[index]
        return (_blur(color, pair.left_kernel), _blur(coverage, pair.left_kernel),
                _blur(color, pair.right_kernel), _blur(coverage, pair.right_kernel))

    rendered = ordered_map(render_layer, range(len(pairs)), threads)

    left = _composite([(color, alpha) for color, alpha, _, _ in rendered], gray.shape)
    right = _composite([(color, alpha) for _, _, color, alpha in rendered], gray.shape)

    if config.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        left = left + rng.normal(0.0, config.noise_sigma, left.shape)
        right = right + rng.normal(0.0, config.noise_sigma, right.shape)

    return DPImagePair(np.clip(left, 0.0, 1.0), np.clip(right, 0.0, 1.0), guide=source)


def render_random_dot_chart(width: int, height: int, dot_density: float = 0.25,
                            seed: Optional[int] = None) -> np.ndarray:
    """
    Render a random-dot chart of anti-aliased unit-area dots.

    Each pixel center hosts a bright disc of area one pixel with probability
    ``dot_density``. The disc is rasterized on a supersampled grid and box
    filtered, so dots are bright in their own pixel with a faint rim on the
    four neighbours, and the mean intensity stays at ``dot_density``.

    Args:
        width: Width in pixels
        height: Height in pixels
        dot_density: Probability that a pixel hosts a dot
        seed: Random seed

    Returns:
        float64 grid in [0, 1]
    """
    if not 0.0 <= dot_density < 1.0:
        raise ValidationError(f"dot_density must lie in [0, 1), got {dot_density}")
    rng = np.random.default_rng(seed)
    centers = (rng.random((int(height), int(width))) < dot_density).astype(np.float64)
    return np.clip(ndimage.convolve(centers, dot_stamp(), mode='constant'), 0.0, 1.0)


def dot_stamp(supersample: int = DOT_SUPERSAMPLE) -> np.ndarray:
    """3x3 pixel footprint of a unit-area disc centered on the middle pixel, summing to 1."""
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    coords = (np.arange(-1, 2)[:, None] + offsets[None, :]).ravel()
    y, x = np.meshgrid(coords, coords, indexing='ij')
    inside = (x ** 2 + y ** 2 <= 1.0 / math.pi).astype(np.float64)
    stamp = inside.reshape(3, supersample, 3, supersample).sum(axis=(1, 3))
    return stamp / stamp.sum()


def centroid_separations(depths: Sequence[float], cam: CameraParams,
                         pixel_pitch: float = DEFAULT_PIXEL_PITCH) -> np.ndarray:
    """Centroid separations of the PSF pairs for a list of depths."""
    return np.array([make_psf_pair(float(z), cam, pixel_pitch).centroid_separation() for z in depths])

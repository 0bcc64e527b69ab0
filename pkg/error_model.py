"""
Template-matching error model for dual-pixel disparity.
Measures the matching error over a simulated sweep of depth, focus distance
and f-number, fits the parametric standard-deviation model
sigma_d = c1 * (c2 * z / (F * z_f)) ** (z / c3), samples Laplace noise with
that standard deviation, and generates noisy sparse training disparities
from RGB-D pairs.
"""

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares

from disparity_core import (CameraParams, DepthMap, DisparityMap, depth_to_disparity, ordered_map, to_gray)
from exceptions import ConfigurationError, FileOperationError, FitError, ValidationError
from optics_simulator import (DEFAULT_PIXEL_PITCH, SimulationConfig, analytic_alpha, calibrate_alpha,
                              render_random_dot_chart, simulate_dp)
from template_matching import MatchConfig, edge_mask, template_match

logger = logging.getLogger(__name__)

MIN_FIT_RECORDS = 10
MIN_DISTINCT_DEPTHS = 3
MIN_SWEEP_SAMPLES = 100


@dataclass(frozen=True)
class ErrorModel:
    """Constants of the matching-error standard deviation model."""
    c1: float
    c2: float
    c3: float
    residual_rms: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        values = (self.c1, self.c2, self.c3)
        if not all(math.isfinite(float(c)) for c in values):
            raise ConfigurationError(f"Error model constants must be finite, got {values}")
        if self.c1 < 0 or self.c2 <= 0 or self.c3 <= 0:
            raise ConfigurationError(f"Error model needs c1 >= 0 and c2, c3 > 0, got {values}")

    @classmethod
    def reference(cls) -> 'ErrorModel':
        """Constants obtained by symbolic regression on simulated sweeps."""
        return cls(6.93, 0.48, 1.39)

    def sigma_d(self, z, z_f, f_number):
        """Standard deviation of the matching error in pixels (vectorized)."""
        return sigma_d(self, z, z_f, f_number)

    def to_dict(self) -> Dict[str, Any]:
        data = {'c1': self.c1, 'c2': self.c2, 'c3': self.c3}
        if self.residual_rms is not None:
            data['residual_rms'] = self.residual_rms
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ErrorModel':
        try:
            rms = data.get('residual_rms')
            return cls(float(data['c1']), float(data['c2']), float(data['c3']),
                       None if rms is None else float(rms))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid error model: {e}")


def sigma_d(model: ErrorModel, z, z_f, f_number):
    """
    Evaluate c1 * (c2 * z / (F * z_f)) ** (z / c3).

    Args:
        model: Error model constants
        z: Depth in meters (scalar or array)
        z_f: Focus distance in meters
        f_number: f-number

    Returns:
        Standard deviation in pixels with the broadcast shape of the inputs
    """
    z = np.asarray(z, dtype=np.float64)
    if model.c1 == 0:
        result = np.zeros(np.broadcast(z, np.asarray(z_f), np.asarray(f_number)).shape)
    else:
        with np.errstate(over='ignore'):
            result = model.c1 * np.power(model.c2 * z / (np.asarray(f_number) * np.asarray(z_f)), z / model.c3)
    return result if result.ndim else float(result)


def sample_disparity(d, sigma, rng: np.random.Generator):
    """
    Add zero-mean Laplace noise whose standard deviation is ``sigma``.

    The Laplace scale is sigma / sqrt(2).

    Raises:
        ValidationError: If any sigma is negative
    """
    d = np.asarray(d, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0) or np.any(np.isnan(sigma)):
        raise ValidationError("sigma must be non-negative")
    shape = np.broadcast(d, sigma).shape
    noisy = d + rng.laplace(0.0, 1.0, size=shape) * (sigma / math.sqrt(2.0))
    return noisy if noisy.ndim else float(noisy)


@dataclass
class SweepRecord:
    """Measured matching error for one (z, z_f, F) condition."""
    z: float
    z_f: float
    F: float
    sigma_measured: float
    n_samples: int

    def __post_init__(self):
        if self.sigma_measured < 0 or not math.isfinite(self.sigma_measured):
            raise ValidationError(f"sigma_measured must be finite and >= 0, got {self.sigma_measured}")
        if self.n_samples < MIN_SWEEP_SAMPLES:
            raise ValidationError(f"Sweep records need >= {MIN_SWEEP_SAMPLES} samples, got {self.n_samples}")


@dataclass
class SweepConfig:
    """Scene and camera settings shared by every sweep point."""
    width: int = 128
    height: int = 128
    dot_density: float = 0.25
    focal_length: float = 0.01  # meters
    pixel_pitch: float = DEFAULT_PIXEL_PITCH
    noise_sigma: float = 0.01
    match: MatchConfig = field(default_factory=MatchConfig)
    calibrate: bool = True

    def __post_init__(self):
        if isinstance(self.match, dict):
            self.match = MatchConfig(**self.match)

    @property
    def border(self) -> int:
        """Margin excluded from error statistics."""
        return self.match.window // 2 + self.match.search_range

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def sweep_camera(z_f: float, f_number: float, sim_cfg: SweepConfig) -> CameraParams:
    """Camera for one sweep condition with alpha matched to the simulator."""
    cam = CameraParams(sim_cfg.focal_length, f_number, z_f)
    if not sim_cfg.calibrate:
        return cam.with_alpha(analytic_alpha(sim_cfg.pixel_pitch))
    alpha = calibrate_alpha(cam, sim_cfg.pixel_pitch, method='matching', match_config=sim_cfg.match)
    return cam.with_alpha(alpha)


def measure_point(z: float, z_f: float, f_number: float, sim_cfg: SweepConfig,
                  seed_sequence: np.random.SeedSequence) -> SweepRecord:
    """Simulate, match and measure the error standard deviation for one condition."""
    chart_seed, noise_seed = (int(s) for s in seed_sequence.generate_state(2))
    cam = sweep_camera(z_f, f_number, sim_cfg)
    chart = render_random_dot_chart(sim_cfg.width, sim_cfg.height, sim_cfg.dot_density, chart_seed)
    depth = DepthMap(np.full(chart.shape, float(z)))
    pair = simulate_dp(chart, depth, cam, SimulationConfig(pixel_pitch=sim_cfg.pixel_pitch,
                                                           noise_sigma=sim_cfg.noise_sigma), seed=noise_seed)
    mask = edge_mask(pair.left, sim_cfg.match)
    matched = template_match(pair, mask, sim_cfg.match)
    truth = depth_to_disparity(depth, cam)

    border = sim_cfg.border
    interior = np.zeros(chart.shape, dtype=bool)
    interior[border:-border, border:-border] = True
    used = matched.valid & truth.valid & interior
    errors = matched.values[used] - truth.values[used]
    if errors.size < MIN_SWEEP_SAMPLES:
        raise ValidationError(f"Only {errors.size} matched pixels at z={z}, z_f={z_f}, F={f_number}; "
                              f"enlarge the sweep image")
    return SweepRecord(float(z), float(z_f), float(f_number), float(np.std(errors)), int(errors.size))


def run_error_sweep(z_list: Sequence[float], zf_list: Sequence[float], f_number_list: Sequence[float],
                    sim_cfg: SweepConfig = None, seed: int = 0, threads: int = 1) -> List[SweepRecord]:
    """
    Measure the matching error over a (z_f, F, z) grid.

    Each grid point gets its own seed derived from (seed, point index), so
    the records do not depend on the thread count.

    Args:
        z_list: Object depths in meters
        zf_list: Focus distances in meters
        f_number_list: f-numbers
        sim_cfg: Scene and camera settings
        seed: Base seed
        threads: Worker threads across grid points

    Returns:
        One SweepRecord per grid point, ordered z_f, then F, then z
    """
    sim_cfg = sim_cfg or SweepConfig()
    grid = list(itertools.product(zf_list, f_number_list, z_list))
    for z_f, f_number, z in grid:
        if min(z_f, f_number, z) <= 0:
            raise ValidationError(f"Sweep values must be positive, got z={z}, z_f={z_f}, F={f_number}")
    logger.info(f"Running error sweep over {len(grid)} conditions")

    def run(indexed):
        index, (z_f, f_number, z) = indexed
        return measure_point(z, z_f, f_number, sim_cfg, np.random.SeedSequence([int(seed), index]))

    return ordered_map(run, list(enumerate(grid)), threads)


def _log_features(records: Sequence[SweepRecord]):
    z = np.array([r.z for r in records])
    ratio = z / (np.array([r.F for r in records]) * np.array([r.z_f for r in records]))
    sigma = np.array([r.sigma_measured for r in records])
    return z, ratio, sigma


def fit_error_model(records: Sequence[SweepRecord], max_iterations: int = 500) -> ErrorModel:
    """
    Fit c1, c2, c3 by nonlinear least squares on log sigma.

    The constants are optimized as logarithms so they stay positive. A linear
    least-squares fit of log sigma = log c1 + (z / c3) * log(c2 * z / (F * z_f))
    provides the starting point.

    Args:
        records: Sweep records
        max_iterations: Function evaluation budget

    Returns:
        Fitted ErrorModel with residual RMS in log space

    Raises:
        FitError: On degenerate sweeps or non-convergence
    """
    records = [r for r in records if r.sigma_measured > 0]
    if len(records) < MIN_FIT_RECORDS:
        raise FitError(f"Need at least {MIN_FIT_RECORDS} records with positive sigma, got {len(records)}")
    if len({r.z for r in records}) < MIN_DISTINCT_DEPTHS:
        raise FitError(f"Sweep must span at least {MIN_DISTINCT_DEPTHS} distinct depths")

    z, ratio, sigma = _log_features(records)
    log_sigma = np.log(sigma)

    design = np.column_stack([np.ones_like(z), z * np.log(ratio), z])
    (log_c1, inv_c3, scaled_log_c2), *_ = np.linalg.lstsq(design, log_sigma, rcond=None)
    if not (inv_c3 > 0 and math.isfinite(inv_c3)):
        inv_c3 = 1.0
    start = np.array([log_c1, scaled_log_c2 / inv_c3, -math.log(inv_c3)])
    start = np.clip(np.nan_to_num(start), -50.0, 50.0)

    def residuals(theta):
        log_c1, log_c2, log_c3 = theta
        return log_c1 + z * np.exp(-log_c3) * (log_c2 + np.log(ratio)) - log_sigma

    result = least_squares(residuals, start, method='lm', max_nfev=max_iterations, xtol=1e-14, ftol=1e-14)
    if not result.success:
        raise FitError(f"Error model fit did not converge: {result.message}", iterations=result.nfev)

    c1, c2, c3 = (float(c) for c in np.exp(result.x))
    rms = float(np.sqrt(np.mean(result.fun ** 2)))
    logger.info(f"Fitted error model c1={c1:.4g} c2={c2:.4g} c3={c3:.4g} (log RMS {rms:.3g})")
    try:
        return ErrorModel(c1, c2, c3, rms)
    except ConfigurationError as e:
        raise FitError(str(e), iterations=result.nfev)


def synthesize_records(model: ErrorModel, z_list: Iterable[float], zf_list: Iterable[float],
                       f_number_list: Iterable[float], noise: float = 0.0,
                       rng: Optional[np.random.Generator] = None, n_samples: int = 1000) -> List[SweepRecord]:
    """Records generated from a known model with optional multiplicative noise."""
    rng = rng or np.random.default_rng(0)
    records = []
    for z_f, f_number, z in itertools.product(zf_list, f_number_list, z_list):
        value = float(model.sigma_d(z, z_f, f_number))
        if noise > 0:
            value *= 1.0 + noise * rng.standard_normal()
        records.append(SweepRecord(float(z), float(z_f), float(f_number), max(value, 0.0), n_samples))
    return records


@dataclass
class CameraSampler:
    """Random camera parameters within a consumer-optics range."""
    zf_range: Tuple[float, float] = (0.3, 10.0)
    f_numbers: Tuple[float, ...] = (1.4, 2.0, 2.8, 4.0)
    focal_range: Tuple[float, float] = (0.024, 0.085)
    pixel_pitch: float = DEFAULT_PIXEL_PITCH
    alpha: Optional[float] = None

    def __post_init__(self):
        self.zf_range = tuple(float(v) for v in self.zf_range)
        self.f_numbers = tuple(float(v) for v in self.f_numbers)
        self.focal_range = tuple(float(v) for v in self.focal_range)
        if not self.f_numbers:
            raise ConfigurationError("CameraSampler needs at least one f-number")
        if not (0 < self.zf_range[0] <= self.zf_range[1] and 0 < self.focal_range[0] <= self.focal_range[1]):
            raise ConfigurationError("CameraSampler ranges must be positive and ordered")
        if self.zf_range[0] <= self.focal_range[1]:
            raise ConfigurationError("Smallest focus distance must exceed the largest focal length")

    def sample(self, rng: np.random.Generator) -> CameraParams:
        """Draw z_f log-uniformly, F from the list and f uniformly."""
        z_f = math.exp(rng.uniform(math.log(self.zf_range[0]), math.log(self.zf_range[1])))
        f_number = float(self.f_numbers[int(rng.integers(len(self.f_numbers)))])
        focal_length = float(rng.uniform(self.focal_range[0], self.focal_range[1]))
        alpha = self.alpha if self.alpha is not None else analytic_alpha(self.pixel_pitch)
        return CameraParams(focal_length, f_number, z_f, alpha)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainingSample:
    """One generated sample: noisy sparse disparity, pseudo ground truth and guide."""
    sparse: DisparityMap
    dense: DisparityMap
    guide: np.ndarray
    camera: CameraParams


def generate_training_sample(rgb: np.ndarray, depth: DepthMap, cam_sampler: CameraSampler,
                             model: ErrorModel, match_cfg: MatchConfig, rng: np.random.Generator) -> TrainingSample:
    """
    Turn an RGB-D pair into a noisy sparse disparity sample.

    Args:
        rgb: Guide image in [0, 1]
        depth: Aligned depth map
        cam_sampler: Camera parameter sampler
        model: Error model for the noise magnitude
        match_cfg: Matching configuration for the edge mask
        rng: Random generator

    Returns:
        TrainingSample with sparse valid exactly on edge mask and valid depth

    Raises:
        ValidationError: If the shapes differ or the model gives a non-finite sigma
    """
    if np.shape(rgb)[:2] != depth.shape:
        raise ValidationError(f"RGB {np.shape(rgb)[:2]} and depth {depth.shape} dimensions differ")
    cam = cam_sampler.sample(rng)
    dense = depth_to_disparity(depth, cam)
    mask = edge_mask(to_gray(rgb), match_cfg).as_mask() & depth.valid & dense.valid

    sigma = np.asarray(model.sigma_d(depth.values[mask], cam.focus_distance, cam.f_number))
    if not np.all(np.isfinite(sigma)):
        raise ValidationError(f"Error model overflows for camera {cam.to_dict()}")
    values = np.full(depth.shape, np.nan)
    values[mask] = sample_disparity(dense.values[mask], sigma, rng)
    return TrainingSample(DisparityMap(values, mask), dense, np.asarray(rgb, dtype=np.float64), cam)


def load_rgbd_manifest(path) -> List[Tuple[Path, Path]]:
    """
    Read a CSV manifest of ``rgb,depth`` path pairs.

    Relative paths are resolved against the manifest's directory; a header
    row naming the columns is optional.
    """
    path = Path(str(path))
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            rows = [row for row in csv.reader(f) if row and not row[0].startswith('#')]
    except OSError as e:
        raise FileOperationError(path, "cannot read manifest", e)
    if rows and [c.strip().lower() for c in rows[0][:2]] == ['rgb', 'depth']:
        rows = rows[1:]

    pairs = []
    for row in rows:
        if len(row) < 2:
            raise FileOperationError(path, f"manifest row needs rgb and depth paths: {row}")
        rgb, depth = (Path(c.strip()) for c in row[:2])
        pairs.append((rgb if rgb.is_absolute() else path.parent / rgb,
                      depth if depth.is_absolute() else path.parent / depth))
    if not pairs:
        raise FileOperationError(path, "manifest lists no samples")
    return pairs

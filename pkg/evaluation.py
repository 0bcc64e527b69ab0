"""
Affine-invariant evaluation of disparity estimates.
AI(p) aligns the estimate to the ground truth with the best affine map before
measuring the p-norm error; the Spearman measure reports 1 - |rho_s|; the
uncertainty loss scores an estimate together with its per-pixel uncertainty.
Degenerate inputs produce flagged results instead of exceptions.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from disparity_core import ConfidenceMap, DepthMap, DisparityMap
from exceptions import EvaluationError, FileOperationError

logger = logging.getLogger(__name__)

IRLS_EPS = 1e-9
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 500
L1_SNAP_CANDIDATES = 10
GT_KINDS = ('inverse-depth', 'disparity')

GridLike = Union[np.ndarray, DisparityMap, DepthMap]


class AffineFit(NamedTuple):
    value: float
    beta0: float
    beta1: float
    degenerate: bool


class SpearmanResult(NamedTuple):
    value: float
    rho: float
    degenerate: bool


def _grid_and_mask(grid: GridLike) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(grid, (DisparityMap, DepthMap)):
        return grid.values, grid.valid
    values = np.asarray(grid, dtype=np.float64)
    return values, np.isfinite(values)


def common_samples(est: GridLike, gt: GridLike) -> Tuple[np.ndarray, np.ndarray]:
    """Flattened estimate and ground truth over the intersection of validity masks."""
    est_values, est_valid = _grid_and_mask(est)
    gt_values, gt_valid = _grid_and_mask(gt)
    if est_values.shape != gt_values.shape:
        raise EvaluationError(f"Estimate {est_values.shape} and ground truth {gt_values.shape} dimensions differ")
    both = est_valid & gt_valid
    return est_values[both].astype(np.float64), gt_values[both].astype(np.float64)


def _objective(x: np.ndarray, y: np.ndarray, beta0: float, beta1: float, p: float) -> float:
    return float(np.mean(np.abs(y - (beta0 + beta1 * x)) ** p) ** (1.0 / p))


def _weighted_lstsq(design: np.ndarray, y: np.ndarray, weights: np.ndarray) -> np.ndarray:
    root = np.sqrt(weights)
    coefficients, *_ = np.linalg.lstsq(design * root[:, None], y * root, rcond=None)
    return coefficients


def fit_affine_irls(x: np.ndarray, y: np.ndarray, p: float) -> Tuple[float, float]:
    """
    Minimize mean |y - (b0 + b1 x)|^p by iteratively reweighted least squares.

    Weights are max(|r|, 1e-9)^(p - 2); iteration stops when the coefficient
    change falls below 1e-8 (relative).
    """
    design = np.column_stack([np.ones_like(x), x])
    beta = _weighted_lstsq(design, y, np.ones_like(x))
    if p == 2:
        return float(beta[0]), float(beta[1])
    for iteration in range(IRLS_MAX_ITER):
        residual = np.abs(y - design @ beta)
        weights = np.maximum(residual, IRLS_EPS) ** (p - 2.0)
        updated = _weighted_lstsq(design, y, weights / weights.max())
        change = np.max(np.abs(updated - beta))
        beta = updated
        if change <= IRLS_TOL * (1.0 + np.max(np.abs(beta))):
            break
    else:
        logger.warning(f"IRLS did not reach {IRLS_TOL} after {IRLS_MAX_ITER} iterations (p={p})")
    return float(beta[0]), float(beta[1])


def _snap_l1(x: np.ndarray, y: np.ndarray, beta0: float, beta1: float) -> Tuple[float, float]:
    """An L1 line fit has an optimum through two samples; try lines through the best-fitting pairs."""
    best = (_objective(x, y, beta0, beta1, 1.0), beta0, beta1)
    nearest = np.argsort(np.abs(y - (beta0 + beta1 * x)), kind='stable')[:L1_SNAP_CANDIDATES]
    for i_pos, i in enumerate(nearest):
        for j in nearest[i_pos + 1:]:
            if x[i] == x[j]:
                continue
            slope = (y[j] - y[i]) / (x[j] - x[i])
            intercept = y[i] - slope * x[i]
            value = _objective(x, y, intercept, slope, 1.0)
            if value < best[0]:
                best = (value, intercept, slope)
    return best[1], best[2]


def ai_metric(est: GridLike, gt_inverse_depth: GridLike, p: float = 1, solver: str = 'auto') -> AffineFit:
    """
    Affine-invariant error AI(p).

    Args:
        est: Estimated disparity
        gt_inverse_depth: Ground truth (inverse depth or disparity) grid
        p: 1 or 2
        solver: 'auto' (closed form for p=2, IRLS for p=1), 'closed-form' or 'irls'

    Returns:
        AffineFit(value, beta0, beta1, degenerate)
    """
    if p not in (1, 2):
        raise EvaluationError(f"AI(p) supports p=1 or p=2, got {p}")
    x, y = common_samples(est, gt_inverse_depth)
    if x.size < 2:
        logger.warning(f"AI({p}) needs two common valid pixels, got {x.size}")
        return AffineFit(float('nan'), float('nan'), float('nan'), True)
    if np.ptp(x) == 0:
        # Slope is unidentifiable; the best constant is the mean (p=2) or the median (p=1)
        beta0 = float(np.mean(y)) if p == 2 else float(np.median(y))
        return AffineFit(_objective(x, y, beta0, 0.0, p), beta0, 0.0, True)

    if solver == 'closed-form' or (solver == 'auto' and p == 2):
        if p != 2:
            raise EvaluationError("The closed-form solver only applies to p=2")
        design = np.column_stack([np.ones_like(x), x])
        (beta0, beta1), *_ = np.linalg.lstsq(design, y, rcond=None)
    elif solver in ('irls', 'auto'):
        beta0, beta1 = fit_affine_irls(x, y, float(p))
        if p == 1:
            beta0, beta1 = _snap_l1(x, y, beta0, beta1)
    else:
        raise EvaluationError(f"Unknown solver '{solver}'")
    return AffineFit(_objective(x, y, float(beta0), float(beta1), p), float(beta0), float(beta1), False)


def spearman_measure(est: GridLike, gt: GridLike) -> SpearmanResult:
    """
    1 - |rho_s| with average ranks for ties.

    The estimate is first mapped through its AI(2) affine alignment; ranks
    are unchanged up to a global reversal.
    """
    x, y = common_samples(est, gt)
    if x.size < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        logger.warning("Spearman measure is undefined for fewer than 3 pixels or constant input")
        return SpearmanResult(float('nan'), float('nan'), True)
    design = np.column_stack([np.ones_like(x), x])
    (beta0, beta1), *_ = np.linalg.lstsq(design, y, rcond=None)
    aligned = beta0 + beta1 * x if beta1 != 0 else x
    rho, _ = stats.spearmanr(aligned, y)
    rho = float(rho)
    if not math.isfinite(rho):
        return SpearmanResult(float('nan'), float('nan'), True)
    return SpearmanResult(1.0 - abs(rho), rho, False)


def uncertainty_from_confidence(conf: ConfidenceMap, floor: float = 1e-3) -> np.ndarray:
    """Uncertainty sigma = max(1 - confidence, floor)."""
    if floor <= 0:
        raise EvaluationError(f"Uncertainty floor must be positive, got {floor}")
    return np.maximum(1.0 - conf.values, floor)


def uncertainty_loss(est: GridLike, gt: GridLike, sigma) -> float:
    """
    Mean of sqrt(exp(-s) * r^2 + 2 s) with s = 2 log sigma.

    The radicand is clamped at zero for sigma < 1.

    Args:
        est: Estimated disparity
        gt: Ground-truth disparity
        sigma: Per-pixel uncertainty grid, or a ConfidenceMap converted with
            ``uncertainty_from_confidence``

    Raises:
        EvaluationError: On non-positive sigma or mismatched dimensions
    """
    sigma = uncertainty_from_confidence(sigma) if isinstance(sigma, ConfidenceMap) \
        else np.asarray(sigma, dtype=np.float64)
    est_values, est_valid = _grid_and_mask(est)
    gt_values, gt_valid = _grid_and_mask(gt)
    if not (est_values.shape == gt_values.shape == sigma.shape):
        raise EvaluationError(f"Dimensions differ: est {est_values.shape}, gt {gt_values.shape}, "
                              f"sigma {sigma.shape}")
    both = est_valid & gt_valid
    if not both.any():
        raise EvaluationError("No common valid pixels")
    sigma = sigma[both]
    if np.any(~(sigma > 0)):
        raise EvaluationError("Uncertainty sigma must be positive")
    log_var = 2.0 * np.log(sigma)
    residual = est_values[both] - gt_values[both]
    radicand = np.maximum(np.exp(-log_var) * residual ** 2 + 2.0 * log_var, 0.0)
    return float(np.mean(np.sqrt(radicand)))


def laplace_vs_gaussian_loglik(errors: Sequence[float]) -> Tuple[float, float]:
    """
    Maximum-likelihood log-likelihoods of Laplace and Gaussian fits.

    Returns:
        (laplace_loglik, gaussian_loglik); NaN for fewer than two distinct values
    """
    errors = np.asarray(errors, dtype=np.float64)
    errors = errors[np.isfinite(errors)]
    if errors.size < 2 or np.ptp(errors) == 0:
        return float('nan'), float('nan')
    laplace_loc, laplace_scale = stats.laplace.fit(errors)
    normal_loc, normal_scale = stats.norm.fit(errors)
    return (float(stats.laplace.logpdf(errors, laplace_loc, laplace_scale).sum()),
            float(stats.norm.logpdf(errors, normal_loc, normal_scale).sum()))


@dataclass
class MetricReport:
    """Evaluation of one estimate against ground truth."""
    ai1: float
    ai2: float
    spearman_one_minus_abs: float
    beta0: float
    beta1: float
    n_pixels: int
    degenerate: bool = False
    gt_kind: str = 'inverse-depth'

    CSV_FIELDS = ('ai1', 'ai2', 'spearman_one_minus_abs', 'beta0', 'beta1', 'n_pixels', 'degenerate', 'gt_kind')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _ground_truth_grid(gt, gt_kind: str) -> GridLike:
    if gt_kind not in GT_KINDS:
        raise EvaluationError(f"Unknown ground-truth kind '{gt_kind}'. Valid kinds: {', '.join(GT_KINDS)}")
    if gt_kind == 'inverse-depth' and isinstance(gt, DepthMap):
        with np.errstate(divide='ignore'):
            return np.where(gt.valid, 1.0 / np.where(gt.valid, gt.values, 1.0), np.nan)
    return gt


def _crop(grid: GridLike, crop: Optional[Sequence[int]]) -> GridLike:
    if crop is None:
        return grid
    x0, y0, x1, y1 = (int(v) for v in crop)
    values, valid = _grid_and_mask(grid)
    if not (0 <= x0 < x1 <= values.shape[1] and 0 <= y0 < y1 <= values.shape[0]):
        raise EvaluationError(f"Crop {tuple(crop)} lies outside the {values.shape[1]}x{values.shape[0]} map")
    return np.where(valid, values, np.nan)[y0:y1, x0:x1]


def evaluate(est: GridLike, gt, gt_kind: str = 'inverse-depth',
             crop: Optional[Sequence[int]] = None) -> MetricReport:
    """
    Compute AI(1), AI(2) and the Spearman measure.

    Args:
        est: Estimated disparity
        gt: DepthMap (converted to inverse depth), or a grid already holding
            inverse depth or disparity
        gt_kind: 'inverse-depth' or 'disparity'
        crop: Optional (x0, y0, x1, y1) rectangle

    Returns:
        MetricReport; beta0/beta1 come from the AI(2) alignment
    """
    truth = _crop(_ground_truth_grid(gt, gt_kind), crop)
    estimate = _crop(est, crop)
    ai1 = ai_metric(estimate, truth, 1)
    ai2 = ai_metric(estimate, truth, 2)
    spearman = spearman_measure(estimate, truth)
    n_pixels = common_samples(estimate, truth)[0].size
    return MetricReport(ai1.value, ai2.value, spearman.value, ai2.beta0, ai2.beta1, int(n_pixels),
                        ai1.degenerate or ai2.degenerate or spearman.degenerate, gt_kind)


def append_csv_row(report: MetricReport, path, label: str = ""):
    """Append a report row to a CSV file, writing the header for a new file."""
    path = Path(str(path))
    new_file = not path.exists() or path.stat().st_size == 0
    row = report.to_dict()
    row['label'] = label
    try:
        with open(path, 'a', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=('label',) + MetricReport.CSV_FIELDS)
            if new_file:
                writer.writeheader()
            writer.writerow(row)
    except OSError as e:
        raise FileOperationError(path, "cannot append metrics row", e)

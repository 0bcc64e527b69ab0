"""
Disparity refinement with the Fast Global Smoother.
Implements the guided weighted-least-squares energy

    J(u) = sum_p h_p (u_p - f_p)^2 + lambda * sum_p sum_{q in N4(p)} w_pq (u_p - u_q)^2,
    w_pq = exp(-|g_p - g_q|_1 / sigma_color),

its fast approximate minimizer (alternating 1-D tridiagonal passes followed by
line-relaxation polish sweeps), an exact conjugate-gradient minimizer used as
a reference, the weighted median pre-filter, disparity-edge confidence
refinement, and FGS-based sparse-to-dense completion.

Every undirected edge appears twice in the double sum, so the normal
equations are (H + 2 * lambda * L_w) u = H f.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import ndimage, sparse
from scipy.linalg import LinAlgError, solve_banded
from scipy.sparse.linalg import cg

from disparity_core import ConfidenceMap, DisparityMap
from exceptions import ConfigurationError, SolverError
from validation_utils import InputValidator

logger = logging.getLogger(__name__)

DENOMINATOR_EPS = 1e-12
EXACT_RTOL = 1e-10
WMF_CHUNK_ROWS = 32


@dataclass
class FgsConfig:
    """Smoothing parameters; ``lambda_`` is the smoothness weight."""
    lambda_: float = 128.0
    sigma_color: float = 8.0 / 255.0
    iterations: int = 3
    attenuation: float = 4.0
    polish_sweeps: int = 2
    exact_max_side: int = 128

    def __post_init__(self):
        InputValidator.validate_positive(self.lambda_, 'lambda', allow_zero=True).raise_if_invalid(ConfigurationError)
        InputValidator.validate_positive(self.sigma_color, 'sigma_color').raise_if_invalid(ConfigurationError)
        InputValidator.validate_positive(self.attenuation, 'attenuation').raise_if_invalid(ConfigurationError)
        if int(self.iterations) < 1:
            raise ConfigurationError(f"iterations must be >= 1, got {self.iterations}")
        if int(self.polish_sweeps) < 0:
            raise ConfigurationError(f"polish_sweeps must be >= 0, got {self.polish_sweeps}")
        self.iterations = int(self.iterations)
        self.polish_sweeps = int(self.polish_sweeps)

    def lambda_schedule(self):
        """Per-iteration smoothness weights; they sum to ``lambda_``."""
        total = self.attenuation ** self.iterations - 1.0
        if total <= 0:
            return [self.lambda_ / self.iterations] * self.iterations
        return [self.lambda_ * (self.attenuation - 1.0) * self.attenuation ** (self.iterations - t) / total
                for t in range(1, self.iterations + 1)]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['lambda'] = data.pop('lambda_')
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FgsConfig':
        data = dict(data)
        if 'lambda' in data:
            data['lambda_'] = data.pop('lambda')
        return cls(**data)


def _guide_array(guide: np.ndarray, shape) -> np.ndarray:
    g = np.asarray(guide, dtype=np.float64)
    if g.ndim == 2:
        g = g[:, :, None]
    if g.shape[:2] != tuple(shape):
        raise SolverError(f"Guide {g.shape[:2]} does not match map {tuple(shape)}")
    return g


def edge_weights(guide: np.ndarray, sigma_color: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Guide-similarity weights of the 4-neighbour edges.

    Returns:
        (horizontal, vertical) with shapes (H, W-1) and (H-1, W)
    """
    g = np.asarray(guide, dtype=np.float64)
    if g.ndim == 2:
        g = g[:, :, None]
    horizontal = np.exp(-np.abs(np.diff(g, axis=1)).sum(axis=2) / sigma_color)
    vertical = np.exp(-np.abs(np.diff(g, axis=0)).sum(axis=2) / sigma_color)
    return horizontal, vertical


def _as_arrays(f, h) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(f, DisparityMap):
        values = f.filled(0.0)
        confidence = np.asarray(h.values if isinstance(h, ConfidenceMap) else h, dtype=np.float64)
        confidence = np.where(f.valid, confidence, 0.0)
    else:
        values = np.asarray(f, dtype=np.float64)
        confidence = np.asarray(h.values if isinstance(h, ConfidenceMap) else h, dtype=np.float64)
    if values.shape != confidence.shape:
        raise SolverError(f"Map {values.shape} and confidence {confidence.shape} dimensions differ")
    values = np.where(confidence > 0, np.nan_to_num(values), 0.0)
    return values, confidence


def fgs_energy(u, f, h, guide: np.ndarray, cfg: FgsConfig) -> float:
    """
    Evaluate the smoothing energy J(u).

    Args:
        u: Candidate solution (array or DisparityMap, finite everywhere)
        f: Data (invalid samples are ignored through h)
        h: Data-term confidence
        guide: Guide image for the edge weights
        cfg: Smoothing parameters

    Returns:
        Scalar energy
    """
    u = u.filled(0.0) if isinstance(u, DisparityMap) else np.asarray(u, dtype=np.float64)
    values, confidence = _as_arrays(f, h)
    horizontal, vertical = edge_weights(_guide_array(guide, u.shape), cfg.sigma_color)
    data = float(np.sum(confidence * (u - values) ** 2))
    smooth = float(np.sum(horizontal * np.diff(u, axis=1) ** 2) + np.sum(vertical * np.diff(u, axis=0) ** 2))
    return data + 2.0 * cfg.lambda_ * smooth


def _solve_lines(diagonal: np.ndarray, coupling: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """
    Solve independent tridiagonal systems, one per row.

    Args:
        diagonal: (R, N) main diagonals
        coupling: (R, N-1) positive couplings; off-diagonals are -coupling
        rhs: (R, N) or (R, N, K) right-hand sides

    Returns:
        Solutions with the shape of ``rhs``
    """
    rows, length = diagonal.shape
    size = rows * length
    upper = np.zeros((rows, length))
    upper[:, 1:] = -coupling
    lower = np.zeros((rows, length))
    lower[:, :-1] = -coupling
    banded = np.vstack([upper.ravel(), diagonal.ravel(), lower.ravel()])
    b = rhs.reshape(size, -1)
    try:
        solution = solve_banded((1, 1), banded, b, check_finite=False)
    except (LinAlgError, ValueError) as e:
        raise SolverError(f"Tridiagonal solve failed: {e}")
    return solution.reshape(rhs.shape)


def _normalized_passes(values: np.ndarray, confidence: np.ndarray, horizontal: np.ndarray,
                       vertical: np.ndarray, cfg: FgsConfig) -> np.ndarray:
    """Alternating row/column passes of (I + 2 lambda_t L) on h*f and h; returns their ratio."""
    stacked = np.stack([confidence * values, confidence], axis=-1)
    for lam in cfg.lambda_schedule():
        if lam <= 0:
            continue
        # rows
        degree = np.zeros(values.shape)
        degree[:, 1:] += horizontal
        degree[:, :-1] += horizontal
        stacked = _solve_lines(1.0 + 2.0 * lam * degree, 2.0 * lam * horizontal, stacked)
        # columns
        degree = np.zeros(values.shape)
        degree[1:, :] += vertical
        degree[:-1, :] += vertical
        transposed = np.ascontiguousarray(stacked.transpose(1, 0, 2))
        transposed = _solve_lines(1.0 + 2.0 * lam * degree.T, 2.0 * lam * vertical.T, transposed)
        stacked = transposed.transpose(1, 0, 2)

    numerator, denominator = stacked[..., 0], stacked[..., 1]
    anchored = confidence > 0
    fallback = float(values[anchored].mean())
    with np.errstate(divide='ignore', invalid='ignore'):
        result = np.where(denominator > DENOMINATOR_EPS, numerator / denominator, fallback)
    return result


def _relax_lines(u: np.ndarray, values: np.ndarray, confidence: np.ndarray, horizontal: np.ndarray,
                 vertical: np.ndarray, lam: float, parity: int) -> np.ndarray:
    """Exactly minimize J over every row with index parity ``parity``, other rows fixed."""
    rows = np.arange(parity, u.shape[0], 2)
    if rows.size == 0:
        return u
    up = np.zeros(u.shape)
    down = np.zeros(u.shape)
    up[1:, :] = vertical
    down[:-1, :] = vertical
    neighbour_sum = np.zeros(u.shape)
    neighbour_sum[1:, :] += vertical * u[:-1, :]
    neighbour_sum[:-1, :] += vertical * u[1:, :]

    degree = np.zeros(u.shape)
    degree[:, 1:] += horizontal
    degree[:, :-1] += horizontal
    diagonal = confidence + 2.0 * lam * (degree + up + down)
    rhs = confidence * values + 2.0 * lam * neighbour_sum

    diagonal = diagonal[rows]
    rhs = rhs[rows]
    # Pixels with no data and no coupling keep their value
    isolated = diagonal <= 0
    if isolated.any():
        diagonal = np.where(isolated, 1.0, diagonal)
        rhs = np.where(isolated, u[rows], rhs)
    updated = u.copy()
    updated[rows] = _solve_lines(diagonal, 2.0 * lam * horizontal[rows], rhs)
    return updated


def polish(u: np.ndarray, values: np.ndarray, confidence: np.ndarray, guide: np.ndarray,
           cfg: FgsConfig, sweeps: Optional[int] = None) -> np.ndarray:
    """
    Red-black line relaxation on the exact energy.

    Each half sweep minimizes J exactly over a set of independent rows (or
    columns), so J never increases.
    """
    sweeps = cfg.polish_sweeps if sweeps is None else int(sweeps)
    if sweeps <= 0 or cfg.lambda_ == 0:
        return u
    horizontal, vertical = edge_weights(_guide_array(guide, u.shape), cfg.sigma_color)
    for _ in range(sweeps):
        for parity in (0, 1):
            u = _relax_lines(u, values, confidence, horizontal, vertical, cfg.lambda_, parity)
        u_t, values_t, confidence_t = u.T, values.T, confidence.T
        for parity in (0, 1):
            u_t = _relax_lines(u_t, values_t, confidence_t, vertical.T, horizontal.T, cfg.lambda_, parity)
        u = np.ascontiguousarray(u_t.T)
    return u


def fgs_solve(f, h, guide: np.ndarray, cfg: FgsConfig = None) -> DisparityMap:
    """
    Approximately minimize the smoothing energy.

    Runs the normalized alternating 1-D passes with the attenuated lambda
    schedule, then polish sweeps started from whichever of the pass output
    and the data itself has the lower energy.

    Args:
        f: Data map (DisparityMap or array)
        h: Data-term confidence (binary ConfidenceMap or array)
        guide: Guide image
        cfg: Smoothing parameters

    Returns:
        Dense DisparityMap

    Raises:
        SolverError: If no pixel carries data
    """
    cfg = cfg or FgsConfig()
    values, confidence = _as_arrays(f, h)
    if not np.any(confidence > 0):
        raise SolverError("Confidence is zero everywhere; the data term vanishes")
    guide = _guide_array(guide, values.shape)
    horizontal, vertical = edge_weights(guide, cfg.sigma_color)

    passed = _normalized_passes(values, confidence, horizontal, vertical, cfg)
    if cfg.lambda_ > 0:
        # The data clipped to the anchored range never has higher energy than the data itself
        raw = f.values if isinstance(f, DisparityMap) else np.asarray(f, dtype=np.float64)
        anchored_values = values[confidence > 0]
        clipped = np.clip(raw, anchored_values.min(), anchored_values.max())
        anchored = np.where(np.isfinite(raw), clipped, passed)
        if fgs_energy(anchored, values, confidence, guide, cfg) < fgs_energy(passed, values, confidence, guide, cfg):
            passed = anchored
        passed = polish(passed, values, confidence, guide, cfg)
    return DisparityMap(passed)


def fgs_solve_exact(f, h, guide: np.ndarray, cfg: FgsConfig = None) -> DisparityMap:
    """
    Exactly minimize the smoothing energy with preconditioned conjugate gradient.

    Solves (H + 2 lambda L_w) u = H f to a relative residual of 1e-10.

    Raises:
        SolverError: If the map exceeds the size cap, no pixel carries data
            or the solver does not converge
    """
    cfg = cfg or FgsConfig()
    values, confidence = _as_arrays(f, h)
    height, width = values.shape
    if max(height, width) > cfg.exact_max_side:
        raise SolverError(f"Exact solver is capped at {cfg.exact_max_side}px per side, got {width}x{height}")
    if cfg.lambda_ == 0:
        return DisparityMap(np.where(confidence > 0, values, np.nan))
    if not np.any(confidence > 0):
        raise SolverError("Confidence is zero everywhere; the system is singular")

    horizontal, vertical = edge_weights(_guide_array(guide, values.shape), cfg.sigma_color)
    index = np.arange(height * width).reshape(height, width)
    rows = np.concatenate([index[:, :-1].ravel(), index[:-1, :].ravel()])
    cols = np.concatenate([index[:, 1:].ravel(), index[1:, :].ravel()])
    weights = 2.0 * cfg.lambda_ * np.concatenate([horizontal.ravel(), vertical.ravel()])

    size = height * width
    adjacency = sparse.coo_matrix((weights, (rows, cols)), shape=(size, size)).tocsr()
    adjacency = adjacency + adjacency.T
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    diagonal = confidence.ravel() + degree
    system = (sparse.diags(diagonal) - adjacency).tocsr()
    rhs = (confidence * values).ravel()

    preconditioner = sparse.diags(1.0 / np.where(diagonal > 0, diagonal, 1.0))
    solution, info = cg(system, rhs, rtol=EXACT_RTOL, atol=0.0, maxiter=20 * size, M=preconditioner)
    if info != 0:
        raise SolverError(f"Conjugate gradient did not converge (info={info})")
    return DisparityMap(solution.reshape(height, width))


def weighted_median(d: DisparityMap, guide: np.ndarray, window: int = 7,
                    sigma_color: float = 0.1) -> DisparityMap:
    """
    Guide-weighted median of valid neighbours in a square window.

    The weighted median is the smallest neighbour value whose cumulative
    weight reaches half the window's total weight, so outputs are always
    members of the input.

    Args:
        d: Disparity map
        guide: Guide image
        window: Odd window side
        sigma_color: Guide-similarity bandwidth

    Returns:
        Filtered map; invalid pixels stay invalid
    """
    InputValidator.validate_odd(window, 'window', minimum=1).raise_if_invalid(ConfigurationError)
    g = _guide_array(guide, d.shape)
    radius = window // 2
    height, width = d.shape

    padded_values = np.pad(np.where(d.valid, d.values, np.inf), radius, mode='constant', constant_values=np.inf)
    padded_valid = np.pad(d.valid, radius, mode='constant', constant_values=False)
    padded_guide = np.pad(g, ((radius, radius), (radius, radius), (0, 0)), mode='edge')
    offsets = [(dy, dx) for dy in range(window) for dx in range(window)]

    output = np.full(d.shape, np.nan)
    for top in range(0, height, WMF_CHUNK_ROWS):
        bottom = min(top + WMF_CHUNK_ROWS, height)
        center = g[top:bottom]
        neighbours = np.stack([padded_values[top + dy:bottom + dy, dx:dx + width] for dy, dx in offsets], axis=-1)
        weights = np.stack([
            np.exp(-np.abs(padded_guide[top + dy:bottom + dy, dx:dx + width] - center).sum(axis=2) / sigma_color)
            * padded_valid[top + dy:bottom + dy, dx:dx + width]
            for dy, dx in offsets], axis=-1)

        order = np.argsort(neighbours, axis=-1, kind='stable')
        sorted_values = np.take_along_axis(neighbours, order, axis=-1)
        cumulative = np.cumsum(np.take_along_axis(weights, order, axis=-1), axis=-1)
        half = 0.5 * cumulative[..., -1:]
        pick = np.argmax(cumulative >= half, axis=-1)
        output[top:bottom] = np.take_along_axis(sorted_values, pick[..., None], axis=-1)[..., 0]

    return DisparityMap(np.where(d.valid, output, np.nan), d.valid.copy())


def _fill_invalid(d: DisparityMap) -> np.ndarray:
    if d.valid.all() or not d.valid.any():
        return d.filled(0.0)
    _, (iy, ix) = ndimage.distance_transform_edt(~d.valid, return_indices=True)
    return d.values[iy, ix]


def disparity_edges(d: DisparityMap, edge_support: int = 3) -> np.ndarray:
    """
    Normalized disparity edge strength in [0, 1].

    Sobel magnitude (3x3), dilated by a maximum filter so that the response
    spans ``edge_support`` pixels, divided by its 99th percentile.
    """
    InputValidator.validate_odd(edge_support, 'edge_support', minimum=3).raise_if_invalid(ConfigurationError)
    filled = _fill_invalid(d)
    magnitude = np.hypot(ndimage.sobel(filled, axis=1, mode='nearest'),
                         ndimage.sobel(filled, axis=0, mode='nearest'))
    if edge_support > 3:
        magnitude = ndimage.maximum_filter(magnitude, size=edge_support - 2, mode='nearest')
    scale = float(np.percentile(magnitude, 99))
    if scale <= 0:
        scale = float(magnitude.max())
    if scale <= 0:
        return np.zeros(d.shape)
    return np.clip(magnitude / scale, 0.0, 1.0)


def refine_confidence(conf: ConfidenceMap, d: DisparityMap, edge_support: int = 3,
                      binarize_threshold: float = 0.5) -> ConfidenceMap:
    """
    Suppress confidence on disparity edges and binarize.

    Args:
        conf: Initial confidence
        d: Disparity map whose edges are suppressed
        edge_support: Width of the edge response in pixels (odd, >= 3)
        binarize_threshold: Threshold on conf * (1 - edge strength)

    Returns:
        Binary ConfidenceMap
    """
    if conf.shape != d.shape:
        raise SolverError(f"Confidence {conf.shape} and disparity {d.shape} dimensions differ")
    product = conf.values * (1.0 - disparity_edges(d, edge_support))
    return ConfidenceMap(np.where(d.valid, product, 0.0)).binarize(binarize_threshold)


def complete_sparse(sparse_map: DisparityMap, guide: np.ndarray, cfg: FgsConfig = None,
                    tau: float = 8.0) -> Tuple[DisparityMap, ConfidenceMap]:
    """
    Densify a sparse disparity map with the smoother in completion mode.

    The data term is the sparse validity; confidence decays with the distance
    to the nearest valid sample as exp(-distance / tau).

    Raises:
        SolverError: If the sparse map has no valid pixel
    """
    if not sparse_map.valid.any():
        raise SolverError("Sparse disparity has no valid pixel to complete from")
    InputValidator.validate_positive(tau, 'tau').raise_if_invalid(ConfigurationError)
    dense = fgs_solve(sparse_map, sparse_map.valid.astype(np.float64), guide, cfg)
    distance = ndimage.distance_transform_edt(~sparse_map.valid)
    logger.debug(f"Completed {sparse_map.count_valid()} samples to {dense.count_valid()} pixels")
    return dense, ConfidenceMap(np.exp(-distance / tau))


@dataclass
class RefineConfig:
    """Parameters of the refinement chain."""
    fgs: FgsConfig = field(default_factory=FgsConfig)
    wmf_window: int = 7
    wmf_sigma_color: float = 0.1
    binarize_threshold: float = 0.5
    edge_support: int = 3
    use_weighted_median: bool = True
    use_confidence_refiner: bool = True

    def __post_init__(self):
        if isinstance(self.fgs, dict):
            self.fgs = FgsConfig.from_dict(self.fgs)
        InputValidator.validate_odd(self.wmf_window, 'wmf_window', minimum=1).raise_if_invalid(ConfigurationError)
        InputValidator.validate_odd(self.edge_support, 'edge_support', minimum=3).raise_if_invalid(
            ConfigurationError)
        InputValidator.validate_positive(self.wmf_sigma_color, 'wmf_sigma_color').raise_if_invalid(
            ConfigurationError)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['fgs'] = self.fgs.to_dict()
        return data


def refine_pipeline(dense: DisparityMap, conf: ConfidenceMap, guide: np.ndarray,
                    cfg: RefineConfig = None) -> DisparityMap:
    """
    Weighted median, confidence refinement, then the smoother, in that order.

    Args:
        dense: Dense disparity (any source)
        conf: Its confidence
        guide: Guide image
        cfg: Refinement parameters

    Returns:
        Refined DisparityMap
    """
    cfg = cfg or RefineConfig()
    if conf.shape != dense.shape:
        raise SolverError(f"Confidence {conf.shape} and disparity {dense.shape} dimensions differ")
    filtered = weighted_median(dense, guide, cfg.wmf_window, cfg.wmf_sigma_color) \
        if cfg.use_weighted_median else dense
    if cfg.use_confidence_refiner:
        gate = refine_confidence(conf, filtered, cfg.edge_support, cfg.binarize_threshold)
    else:
        gate = ConfidenceMap(np.where(filtered.valid, conf.values, 0.0)).binarize(cfg.binarize_threshold)
    logger.debug(f"Refinement data term covers {gate.values.mean():.1%} of the pixels")
    return fgs_solve(filtered, gate, guide, cfg.fgs)

"""
Synthetic CG scenes with known depth.
Each scene has a random-dot texture for the DP simulator, a piecewise-constant
RGB guide marking its surfaces, and a depth map. Plane depths are chosen from
target disparities so scenes stay within the matcher's search range for any
camera.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from disparity_core import CameraParams, DepthMap, DisparityMap, depth_to_disparity, disparity_to_depth
from exceptions import ConfigurationError, ValidationError
from optics_simulator import render_random_dot_chart

logger = logging.getLogger(__name__)

PALETTE = (
    (0.80, 0.35, 0.30),
    (0.25, 0.55, 0.80),
    (0.35, 0.75, 0.35),
    (0.85, 0.75, 0.30),
)


@dataclass
class SyntheticScene:
    """Texture, guide and depth of one rendered scene."""
    name: str
    texture: np.ndarray
    guide: np.ndarray
    depth: DepthMap
    camera: CameraParams

    @property
    def disparity(self) -> DisparityMap:
        """Pseudo ground truth from the thin-lens conversion."""
        return depth_to_disparity(self.depth, self.camera)


def _depth_for(disparity: np.ndarray, cam: CameraParams) -> DepthMap:
    depth = disparity_to_depth(DisparityMap(disparity), cam)
    if not depth.valid.all():
        raise ConfigurationError("Target disparity lies beyond the camera's infinity limit")
    return depth


def _compose(labels: np.ndarray, contrasts, seed: int):
    height, width = labels.shape
    rng = np.random.default_rng(seed)
    texture = np.zeros(labels.shape)
    guide = np.zeros(labels.shape + (3,))
    for region in np.unique(labels):
        chart = render_random_dot_chart(width, height, 0.25, int(rng.integers(2 ** 31)))
        inside = labels == region
        contrast = contrasts[int(region) % len(contrasts)]
        texture[inside] = 0.5 + contrast * (chart[inside] - 0.5)
        guide[inside] = PALETTE[int(region) % len(PALETTE)]
    return texture, guide


def step_edge(width: int, height: int, disparity_range: float, seed: int, edge_column: int = None,
              contrasts=(1.0, 1.0)):
    """Near left half, far right half, split at ``edge_column``."""
    edge_column = width // 2 if edge_column is None else int(edge_column)
    labels = np.zeros((height, width), dtype=np.int64)
    labels[:, edge_column:] = 1
    disparity = np.where(labels == 0, -disparity_range, disparity_range)
    return labels, disparity, contrasts


def two_plane(width: int, height: int, disparity_range: float, seed: int):
    """Vertical split at 40% of the width."""
    return step_edge(width, height, disparity_range, seed, edge_column=int(0.4 * width))


def slanted_plane(width: int, height: int, disparity_range: float, seed: int):
    """Single plane whose disparity ramps linearly across the image."""
    labels = np.zeros((height, width), dtype=np.int64)
    ramp = np.linspace(-disparity_range, disparity_range, width)
    return labels, np.tile(ramp, (height, 1)), (1.0,)


def box_on_plane(width: int, height: int, disparity_range: float, seed: int):
    """Near box in the center of a far background plane."""
    labels = np.zeros((height, width), dtype=np.int64)
    labels[height // 4:3 * height // 4, width // 4:3 * width // 4] = 1
    disparity = np.where(labels == 1, -disparity_range, 0.75 * disparity_range)
    return labels, disparity, (1.0, 1.0)


def three_layer(width: int, height: int, disparity_range: float, seed: int):
    """Three vertical bands: near, in focus, far."""
    labels = np.zeros((height, width), dtype=np.int64)
    labels[:, width // 3:2 * width // 3] = 1
    labels[:, 2 * width // 3:] = 2
    disparity = np.choose(labels, [-disparity_range, 0.0, disparity_range]).astype(np.float64)
    return labels, disparity, (1.0, 1.0, 1.0)


SCENE_BUILDERS: Dict[str, Callable] = {
    'step-edge': step_edge,
    'two-plane': two_plane,
    'slanted-plane': slanted_plane,
    'box-on-plane': box_on_plane,
    'three-layer': three_layer,
}


def available_scenes() -> List[str]:
    return list(SCENE_BUILDERS)


def make_scene(name: str, cam: CameraParams, width: int = 128, height: int = 128,
               disparity_range: float = 4.0, seed: int = 0, **options) -> SyntheticScene:
    """
    Build a named synthetic scene.

    Args:
        name: One of ``available_scenes()``
        cam: Camera used to turn target disparities into depth
        width: Width in pixels
        height: Height in pixels
        disparity_range: Largest target |disparity| in pixels
        seed: Texture seed
        **options: Scene-specific options (``edge_column`` and ``contrasts`` for step-edge)

    Returns:
        SyntheticScene
    """
    builder = SCENE_BUILDERS.get(name)
    if builder is None:
        raise ValidationError(f"Unknown scene '{name}'. Valid scenes: {', '.join(SCENE_BUILDERS)}")
    labels, disparity, contrasts = builder(int(width), int(height), float(disparity_range), int(seed), **options)
    texture, guide = _compose(labels, contrasts, int(seed))
    logger.debug(f"Built scene '{name}' {width}x{height} with {len(np.unique(labels))} surfaces")
    return SyntheticScene(name, texture, guide, _depth_for(disparity, cam), cam)

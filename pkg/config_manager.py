"""
Configuration management for the dual-pixel disparity pipeline.
Handles environment variables, JSON config files, frozen defaults and
fail-fast validation of pipeline configurations.
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from disparity_core import CameraParams
from error_model import CameraSampler, ErrorModel, SweepConfig
from exceptions import ConfigurationError
from optics_simulator import ALPHA_CALIBRATION_METHODS, DEFAULT_PIXEL_PITCH, SimulationConfig
from refinement import FgsConfig, RefineConfig
from synthetic_scenes import available_scenes
from template_matching import MatchConfig

logger = logging.getLogger(__name__)

LOG_LEVEL_VAR = 'DP_DISPARITY_LOG'
THREADS_VAR = 'DP_DISPARITY_THREADS'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


def configure_logging(level: Optional[str] = None) -> str:
    """
    Configure root logging from ``level`` or the DP_DISPARITY_LOG variable.

    Returns:
        The level name applied
    """
    load_dotenv()
    name = (level or os.getenv(LOG_LEVEL_VAR) or 'WARNING').upper()
    if name not in LOG_LEVELS:
        raise ConfigurationError(f"Invalid log level '{name}'. Valid levels: {', '.join(LOG_LEVELS)}")
    logging.basicConfig(level=getattr(logging, name),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.getLogger().setLevel(getattr(logging, name))
    return name


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigManager:
    """Manages configuration files and environment settings."""

    PIPELINE_SECTIONS = ('simulation', 'match', 'fgs', 'refine', 'completion', 'evaluation')

    def __init__(self):
        """Initialize configuration manager."""
        load_dotenv()

    def get_threads(self, override: Optional[int] = None) -> int:
        """
        Worker thread cap from the CLI flag or DP_DISPARITY_THREADS.

        Raises:
            ConfigurationError: If the value is not a positive integer
        """
        raw = override if override is not None else os.getenv(THREADS_VAR, '1')
        try:
            threads = int(raw)
        except (TypeError, ValueError):
            raise ConfigurationError(f"Invalid thread count: {raw}")
        if threads < 1:
            raise ConfigurationError(f"Thread count must be at least 1, got {threads}")
        return threads

    @staticmethod
    def get_default_config() -> Dict[str, Any]:
        """Get default configuration values."""
        return {
            'seed': 0,
            'threads': 1,
            'camera': {
                'focal_length_m': 0.05,
                'f_number': 2.0,
                'focus_distance_m': 2.0,
                'alpha': 1.0,
                'pixel_pitch_m': DEFAULT_PIXEL_PITCH,
                'calibrate_alpha': True,
                'alpha_calibration': 'matching',
            },
            'simulation': {
                'noise_sigma': 0.01,
                'num_layers': 16,
                'max_radius': 64.0,
                'supersample': 8,
            },
            'match': MatchConfig().to_dict(),
            'fgs': FgsConfig().to_dict(),
            'refine': {
                'wmf_window': 7,
                'wmf_sigma_color': 0.1,
                'binarize_threshold': 0.5,
                'edge_support': 3,
                'use_weighted_median': True,
                'use_confidence_refiner': True,
            },
            'completion': {'tau': 8.0},
            'evaluation': {'gt_kind': 'disparity', 'crop': None},
            'scene': {'name': 'two-plane', 'width': 128, 'height': 128, 'disparity_range': 4.0},
            'camera_sampler': {
                'zf_range': [0.3, 10.0],
                'f_numbers': [1.4, 2.0, 2.8, 4.0],
                'focal_range': [0.024, 0.085],
                'alpha': None,
            },
            'error_model': ErrorModel.reference().to_dict(),
        }

    def load_json(self, path) -> Dict[str, Any]:
        """
        Load a JSON object from a file.

        Raises:
            ConfigurationError: If the file is missing or not a JSON object
        """
        path = Path(str(path)).expanduser()
        if not path.is_file():
            raise ConfigurationError(f"Configuration file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigurationError(f"Cannot parse {path}: {e}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path} must contain a JSON object")
        return data

    def load_camera(self, source) -> CameraParams:
        """
        Load camera parameters from a JSON file path or a dict.

        Returns:
            Validated CameraParams
        """
        data = source if isinstance(source, dict) else self.load_json(source)
        return CameraParams.from_dict(data)

    def pixel_pitch(self, camera_source) -> float:
        """Pixel pitch from the camera JSON, defaulting to 4 micrometers."""
        data = camera_source if isinstance(camera_source, dict) else self.load_json(camera_source)
        try:
            pitch = float(data.get('pixel_pitch_m', DEFAULT_PIXEL_PITCH))
        except (TypeError, ValueError):
            raise ConfigurationError(f"Invalid pixel_pitch_m: {data.get('pixel_pitch_m')}")
        if pitch <= 0:
            raise ConfigurationError(f"pixel_pitch_m must be positive, got {pitch}")
        return pitch

    def alpha_calibration(self, camera_source) -> str:
        """Alpha calibration method from the camera JSON, defaulting to 'matching'."""
        data = camera_source if isinstance(camera_source, dict) else self.load_json(camera_source)
        method = data.get('alpha_calibration', 'matching')
        if method not in ALPHA_CALIBRATION_METHODS:
            raise ConfigurationError(f"alpha_calibration must be one of {ALPHA_CALIBRATION_METHODS}, got {method!r}")
        return method

    def _build(self, factory, section: str, source):
        defaults = self.get_default_config()[section]
        data = source if isinstance(source, dict) else (self.load_json(source) if source else {})
        unknown = set(data) - set(defaults)
        if unknown:
            raise ConfigurationError(f"Unknown {section} settings: {', '.join(sorted(unknown))}")
        try:
            return factory(_merge(defaults, data))
        except TypeError as e:
            raise ConfigurationError(f"Invalid {section} settings: {e}")

    def load_match_config(self, source=None) -> MatchConfig:
        """MatchConfig from a JSON path or dict merged over the defaults."""
        return self._build(lambda d: MatchConfig(**d), 'match', source)

    def load_fgs_config(self, source=None) -> FgsConfig:
        """FgsConfig from a JSON path or dict merged over the defaults."""
        return self._build(FgsConfig.from_dict, 'fgs', source)

    def load_simulation_config(self, source=None, pixel_pitch: float = DEFAULT_PIXEL_PITCH) -> SimulationConfig:
        """SimulationConfig from a JSON path or dict merged over the defaults."""
        return self._build(lambda d: SimulationConfig(pixel_pitch=pixel_pitch, **d), 'simulation', source)

    def load_refine_config(self, source=None) -> RefineConfig:
        """
        RefineConfig from a JSON path or dict.

        The dict may hold refine settings at the top level and an ``fgs``
        section; unknown keys are rejected.
        """
        data = source if isinstance(source, dict) else (self.load_json(source) if source else {})
        fgs = self.load_fgs_config(data.get('fgs', {}))
        section = data.get('refine', {key: value for key, value in data.items() if key != 'fgs'})
        refine = self._build(lambda d: RefineConfig(**d), 'refine', section)
        refine.fgs = fgs
        return refine

    def load_error_model(self, source=None) -> ErrorModel:
        """ErrorModel from a JSON path or dict; the reference constants when None."""
        if source is None:
            return ErrorModel.reference()
        data = source if isinstance(source, dict) else self.load_json(source)
        return ErrorModel.from_dict(data)

    def load_camera_sampler(self, source=None, pixel_pitch: float = DEFAULT_PIXEL_PITCH) -> CameraSampler:
        """CameraSampler from a JSON path or dict merged over the defaults."""
        return self._build(lambda d: CameraSampler(pixel_pitch=pixel_pitch, **d), 'camera_sampler', source)

    def load_sweep_config(self, source) -> Dict[str, Any]:
        """
        Load an error sweep description.

        Expected keys: ``z`` (list), ``z_f`` (list), ``F`` (list) and an
        optional ``simulation`` section for SweepConfig.

        Returns:
            Dict with z_list, zf_list, f_number_list and sweep (SweepConfig)
        """
        data = source if isinstance(source, dict) else self.load_json(source)
        grids = {}
        for key, name in (('z', 'z_list'), ('z_f', 'zf_list'), ('F', 'f_number_list')):
            values = data.get(key)
            if not isinstance(values, list) or not values:
                raise ConfigurationError(f"Sweep config needs a non-empty list '{key}'")
            try:
                grids[name] = [float(v) for v in values]
            except (TypeError, ValueError):
                raise ConfigurationError(f"Sweep list '{key}' must hold numbers")
            if min(grids[name]) <= 0:
                raise ConfigurationError(f"Sweep list '{key}' must hold positive values")
        simulation = dict(data.get('simulation', {}))
        simulation['match'] = self.load_match_config(simulation.get('match', {}))
        try:
            grids['sweep'] = SweepConfig(**simulation)
        except TypeError as e:
            raise ConfigurationError(f"Invalid sweep simulation settings: {e}")
        return grids

    def load_pipeline_config(self, source=None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Resolve a pipeline configuration over the defaults.

        Camera and error-model entries may be file paths; they are loaded and
        inlined so the resolved config fully describes the run.

        Returns:
            Resolved configuration dict
        """
        data = source if isinstance(source, dict) else (self.load_json(source) if source else {})
        data = _merge(data, overrides or {})
        if isinstance(data.get('camera'), str):
            data['camera'] = self.load_json(data['camera'])
        if isinstance(data.get('error_model'), str):
            data['error_model'] = self.load_json(data['error_model'])
        resolved = _merge(self.get_default_config(), data)
        self.validate_pipeline_config(resolved)
        return resolved

    def validate_pipeline_config(self, config: Dict[str, Any]) -> bool:
        """
        Validate a resolved pipeline configuration before any stage runs.

        Raises:
            ConfigurationError: If any section is invalid or a referenced file is missing
        """
        for key in ('camera', 'output_dir') + self.PIPELINE_SECTIONS:
            if key not in config or config[key] is None:
                raise ConfigurationError(f"Missing required configuration: {key}")

        camera = self.load_camera(config['camera'])
        pitch = self.pixel_pitch(config['camera'])
        self.alpha_calibration(config['camera'])
        self.load_simulation_config(config['simulation'], pitch)
        self.load_match_config(config['match'])
        self.load_refine_config({'fgs': config['fgs'], **config['refine']})
        self.load_error_model(config.get('error_model'))

        tau = config['completion'].get('tau')
        if not isinstance(tau, (int, float)) or tau <= 0:
            raise ConfigurationError(f"completion.tau must be positive, got {tau}")
        gt_kind = config['evaluation'].get('gt_kind')
        if gt_kind not in ('inverse-depth', 'disparity'):
            raise ConfigurationError(f"Invalid evaluation.gt_kind: {gt_kind}")

        inputs = config.get('inputs')
        if inputs:
            for key in ('image', 'depth'):
                path = inputs.get(key)
                if not path or not Path(str(path)).is_file():
                    raise ConfigurationError(f"Pipeline input '{key}' not found: {path}")
        else:
            scene = config.get('scene') or {}
            if scene.get('name') not in available_scenes():
                raise ConfigurationError(f"Invalid scene '{scene.get('name')}'. "
                                         f"Valid scenes: {', '.join(available_scenes())}")
            for key in ('width', 'height'):
                if not isinstance(scene.get(key), int) or scene[key] < 1:
                    raise ConfigurationError(f"scene.{key} must be a positive integer")

        if not isinstance(config.get('seed'), int):
            raise ConfigurationError(f"seed must be an integer, got {config.get('seed')}")
        logger.debug(f"Validated pipeline config for camera {camera.to_dict()}")
        return True

    @staticmethod
    def canonical_json(config: Dict[str, Any]) -> str:
        """Canonical JSON: sorted keys, compact separators."""
        return json.dumps(config, sort_keys=True, separators=(',', ':'), ensure_ascii=True)

    @classmethod
    def config_hash(cls, config: Dict[str, Any], exclude=('output_dir', 'threads')) -> str:
        """SHA-256 of the canonical JSON, ignoring keys that do not affect results."""
        relevant = {key: value for key, value in config.items() if key not in exclude}
        return hashlib.sha256(cls.canonical_json(relevant).encode('utf-8')).hexdigest()


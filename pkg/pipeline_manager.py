"""
Pipeline Manager for orchestrating dual-pixel disparity runs.
Runs simulate -> match -> complete -> refine -> evaluate, persisting every
intermediate together with a manifest, and hosts the stereo-versus-DP toy
experiment and the training-data generator.
"""

import json
import logging
import platform
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import PIL
import scipy

from config_manager import ConfigManager
from disparity_core import (CameraParams, DepthMap, DisparityMap, DPImagePair, depth_to_disparity,
                            disparity_to_depth)
from error_model import CameraSampler, ErrorModel, generate_training_sample, load_rgbd_manifest
from evaluation import MetricReport, evaluate, laplace_vs_gaussian_loglik
from exceptions import DPDisparityError, FileOperationError, StageError
from map_io import read_image, read_map, write_json, write_map, write_pfm, write_png8
from optics_simulator import SimulationConfig, calibrate_alpha, render_random_dot_chart, simulate_dp
from refinement import complete_sparse, refine_pipeline
from synthetic_scenes import make_scene
from template_matching import MatchConfig, edge_mask, template_match
from validation_utils import SafeErrorHandler

logger = logging.getLogger(__name__)

PROJECT_NAME = 'dp-disparity'
PROJECT_VERSION = '0.1.0'
WITHIN_TOLERANCE = 1.0  # pixels


@dataclass
class PipelineResult:
    """Artifacts and metrics of one pipeline run."""
    run_dir: Path
    artifacts: Dict[str, str]
    dense_metrics: MetricReport
    refined_metrics: MetricReport
    config_hash: str


@dataclass
class ToyExperimentResult:
    """Stereo versus DP matching accuracy on a random-dot chart."""
    stereo_within: float
    dp_within: float
    laplace_loglik: float
    gaussian_loglik: float
    stereo_pixels: int
    dp_pixels: int
    histogram_path: Optional[str] = None
    summary_path: Optional[str] = None

    @property
    def laplace_preferred(self) -> bool:
        return self.laplace_loglik >= self.gaussian_loglik


def software_versions() -> Dict[str, str]:
    return {
        PROJECT_NAME: PROJECT_VERSION,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pillow': PIL.__version__,
    }


def prepare_camera(config_manager: ConfigManager, camera_source,
                   match_config: Optional[MatchConfig] = None) -> CameraParams:
    """
    Load the camera and, when requested, replace alpha with the simulator calibration.

    The camera JSON key ``alpha_calibration`` picks the method; the default
    'matching' calibrates against the matcher configured by ``match_config``.
    """
    cam = config_manager.load_camera(camera_source)
    data = camera_source if isinstance(camera_source, dict) else config_manager.load_json(camera_source)
    if data.get('calibrate_alpha', False):
        alpha = calibrate_alpha(cam, config_manager.pixel_pitch(data), method=config_manager.alpha_calibration(data),
                                match_config=match_config)
        cam = cam.with_alpha(alpha)
    return cam


class PipelineManager:
    """Manages end-to-end disparity runs and their artifacts."""

    def __init__(self, config_manager: Optional[ConfigManager] = None, threads: int = 1):
        """Initialize the pipeline manager."""
        self.config_manager = config_manager or ConfigManager()
        self.threads = threads

    @contextmanager
    def _stage(self, name: str, artifacts: Dict[str, str]):
        logger.info(f"Stage '{name}' started")
        try:
            yield
        except DPDisparityError as e:
            if isinstance(e, StageError):
                raise
            SafeErrorHandler.log_error(e, name, artifacts)
            raise StageError(name, e, artifacts) from e
        except (ValueError, FloatingPointError, MemoryError, OSError) as e:
            SafeErrorHandler.log_error(e, name, artifacts)
            raise StageError(name, e, artifacts) from e
        logger.info(f"Stage '{name}' finished")

    def run_pipeline(self, config: Dict[str, Any]) -> PipelineResult:
        """
        Run the full pipeline and persist every intermediate.

        Args:
            config: Resolved pipeline configuration (see ConfigManager.load_pipeline_config)

        Returns:
            PipelineResult with artifact paths and metrics

        Raises:
            ConfigurationError: If the configuration is invalid (before any stage runs)
            StageError: If a stage fails; carries the stage name and artifacts written so far
        """
        self.config_manager.validate_pipeline_config(config)
        run_dir = Path(str(config['output_dir']))
        artifacts: Dict[str, str] = {}
        scene_seed, noise_seed = (int(s) for s in np.random.SeedSequence(int(config['seed'])).generate_state(2))

        def out(name: str, filename: str) -> Path:
            path = run_dir / filename
            artifacts[name] = str(path)
            return path

        with self._stage('setup', artifacts):
            run_dir.mkdir(parents=True, exist_ok=True)
            match_cfg = self.config_manager.load_match_config(config['match'])
            cam = prepare_camera(self.config_manager, config['camera'], match_cfg)
            pitch = self.config_manager.pixel_pitch(config['camera'])
            sim_cfg = self.config_manager.load_simulation_config(config['simulation'], pitch)
            refine_cfg = self.config_manager.load_refine_config({'fgs': config['fgs'], **config['refine']})
            texture, guide, depth = self._load_scene(config, cam, scene_seed)
            write_map(depth, out('depth', 'depth.pfm'))
            write_png8(out('guide', 'guide.png'), guide)

        with self._stage('simulate', artifacts):
            simulated = simulate_dp(texture, depth, cam, sim_cfg, seed=noise_seed, threads=self.threads)
            pair = DPImagePair(simulated.left, simulated.right, guide)
            write_pfm(out('left', 'left.pfm'), pair.left)
            write_pfm(out('right', 'right.pfm'), pair.right)

        with self._stage('match', artifacts):
            mask = edge_mask(pair.left, match_cfg)
            sparse = template_match(pair, mask, match_cfg, threads=self.threads)
            write_png8(out('mask', 'mask.png'), mask.values)
            write_map(sparse, out('sparse', 'sparse.pfm'))

        with self._stage('complete', artifacts):
            dense, confidence = complete_sparse(sparse, pair.reference, refine_cfg.fgs,
                                                float(config['completion']['tau']))
            write_map(dense, out('dense', 'dense.pfm'))
            write_map(confidence, out('confidence', 'confidence.pfm'))

        with self._stage('refine', artifacts):
            refined = refine_pipeline(dense, confidence, pair.reference, refine_cfg)
            write_map(refined, out('refined', 'refined.pfm'))

        with self._stage('evaluate', artifacts):
            truth = depth_to_disparity(depth, cam)
            write_map(truth, out('gt_disparity', 'gt_disparity.pfm'))
            gt_kind = config['evaluation']['gt_kind']
            reference = truth if gt_kind == 'disparity' else depth
            crop = config['evaluation'].get('crop')
            dense_metrics = evaluate(dense, reference, gt_kind, crop)
            refined_metrics = evaluate(refined, reference, gt_kind, crop)
            write_json(out('metrics', 'metrics.json'), {
                'sparse_pixels': sparse.count_valid(),
                'dense': dense_metrics.to_dict(),
                'refined': refined_metrics.to_dict(),
            })

        config_hash = self.config_manager.config_hash(config)
        manifest_path = run_dir / 'manifest.json'
        artifacts['manifest'] = str(manifest_path)
        write_json(manifest_path, {
            'config': config,
            'config_hash': config_hash,
            'versions': software_versions(),
            'camera': cam.to_dict(),
            'artifacts': artifacts,
        })
        logger.info(f"Pipeline finished in {run_dir} (config {config_hash[:12]})")
        return PipelineResult(run_dir, artifacts, dense_metrics, refined_metrics, config_hash)

    def rerun_from_manifest(self, manifest_path, output_dir: Optional[str] = None) -> PipelineResult:
        """
        Reproduce a run from its manifest alone.

        Args:
            manifest_path: manifest.json of an earlier run
            output_dir: New run directory; defaults to the recorded one
        """
        manifest = self.config_manager.load_json(manifest_path)
        if 'config' not in manifest:
            raise FileOperationError(manifest_path, "manifest has no 'config' section")
        config = dict(manifest['config'])
        if output_dir:
            config['output_dir'] = str(output_dir)
        config = self.config_manager.load_pipeline_config(config)
        recorded = manifest.get('config_hash')
        if recorded and recorded != self.config_manager.config_hash(config):
            logger.warning("Manifest config hash does not match its config section")
        return self.run_pipeline(config)

    def _load_scene(self, config: Dict[str, Any], cam: CameraParams, seed: int):
        inputs = config.get('inputs')
        if inputs:
            texture = read_image(inputs['image'])
            depth = read_map(inputs['depth'], kind='depth')
            guide = read_image(inputs['guide']) if inputs.get('guide') else texture
            return texture, guide, depth
        scene_cfg = dict(config['scene'])
        name = scene_cfg.pop('name')
        scene = make_scene(name, cam, seed=seed, **scene_cfg)
        return scene.texture, scene.guide, scene.depth

    def toy_experiment(self, seed: int = 0, output_dir=None, size: int = 256, disparity: float = 5.0,
                       camera: Optional[CameraParams] = None, noise_sigma: float = 0.01,
                       match_cfg: Optional[MatchConfig] = None, bin_width: float = 0.25) -> ToyExperimentResult:
        """
        Compare matching on stereo-shifted and DP-simulated random dots.

        Both branches share the ground-truth disparity. The stereo right view
        is the chart shifted by that (integer) disparity; the DP pair is
        simulated at the depth that the thin-lens relation maps to it.

        Args:
            seed: Random seed
            output_dir: Directory for histogram.csv and summary.json (skipped when None)
            size: Chart side in pixels
            disparity: Ground-truth disparity in pixels (rounded for the stereo branch)
            camera: Camera; the default pipeline camera with calibrated alpha when None
            noise_sigma: DP read noise
            match_cfg: Matching configuration
            bin_width: Histogram bin width in pixels

        Returns:
            ToyExperimentResult
        """
        match_cfg = match_cfg or MatchConfig()
        if camera is None:
            camera = prepare_camera(self.config_manager, self.config_manager.get_default_config()['camera'],
                                    match_cfg)
        pitch = self.config_manager.pixel_pitch(self.config_manager.get_default_config()['camera'])
        chart_seed, noise_seed = (int(s) for s in np.random.SeedSequence(int(seed)).generate_state(2))
        shift = int(round(disparity))
        chart = render_random_dot_chart(size, size, 0.25, chart_seed)

        border = match_cfg.window // 2 + match_cfg.search_range
        interior = np.zeros(chart.shape, dtype=bool)
        interior[border:-border, border:-border] = True

        stereo = DPImagePair(chart, np.roll(chart, shift, axis=1))
        stereo_disparity = template_match(stereo, edge_mask(stereo.left, match_cfg), match_cfg, self.threads)
        stereo_errors = stereo_disparity.values[stereo_disparity.valid & interior] - shift

        target = DisparityMap(np.full(chart.shape, float(shift)))
        depth = disparity_to_depth(target, camera)
        dp = simulate_dp(chart, DepthMap(depth.values, depth.valid), camera,
                         SimulationConfig(pixel_pitch=pitch, noise_sigma=noise_sigma), seed=noise_seed,
                         threads=self.threads)
        dp_disparity = template_match(dp, edge_mask(dp.left, match_cfg), match_cfg, self.threads)
        truth = depth_to_disparity(depth, camera)
        used = dp_disparity.valid & interior
        dp_errors = dp_disparity.values[used] - truth.values[used]

        laplace_ll, gaussian_ll = laplace_vs_gaussian_loglik(dp_errors)
        result = ToyExperimentResult(
            stereo_within=float(np.mean(np.abs(stereo_errors) <= WITHIN_TOLERANCE)) if stereo_errors.size else 0.0,
            dp_within=float(np.mean(np.abs(dp_errors) <= WITHIN_TOLERANCE)) if dp_errors.size else 0.0,
            laplace_loglik=laplace_ll,
            gaussian_loglik=gaussian_ll,
            stereo_pixels=int(stereo_errors.size),
            dp_pixels=int(dp_errors.size),
        )
        logger.info(f"Toy experiment: stereo within 1px {result.stereo_within:.1%}, "
                    f"DP within 1px {result.dp_within:.1%}")

        if output_dir is not None:
            run_dir = Path(str(output_dir))
            run_dir.mkdir(parents=True, exist_ok=True)
            limit = float(match_cfg.search_range) * 2 + 1
            edges = np.arange(-limit, limit + bin_width, bin_width)
            stereo_counts, _ = np.histogram(stereo_errors, bins=edges)
            dp_counts, _ = np.histogram(dp_errors, bins=edges)
            histogram_path = run_dir / 'histogram.csv'
            try:
                with open(histogram_path, 'w', encoding='utf-8') as f:
                    f.write('bin_left,bin_right,stereo_count,dp_count\n')
                    for left, right, s_count, d_count in zip(edges[:-1], edges[1:], stereo_counts, dp_counts):
                        f.write(f"{left:.4f},{right:.4f},{int(s_count)},{int(d_count)}\n")
            except OSError as e:
                raise FileOperationError(histogram_path, "cannot write histogram", e)
            result.histogram_path = str(histogram_path)
            result.summary_path = str(run_dir / 'summary.json')
            summary = asdict(result)
            summary.update({'seed': int(seed), 'size': int(size), 'disparity': float(shift),
                            'laplace_preferred': result.laplace_preferred,
                            'dp_error_mean': float(np.mean(dp_errors)) if dp_errors.size else None,
                            'dp_error_std': float(np.std(dp_errors)) if dp_errors.size else None})
            write_json(result.summary_path, summary)
        return result

    def run_datagen(self, manifest_path, model: ErrorModel, count: int, output_dir,
                    sampler: Optional[CameraSampler] = None, match_cfg: Optional[MatchConfig] = None,
                    seed: int = 0) -> Dict[str, Any]:
        """
        Generate noisy sparse training samples from an RGB-D manifest.

        Samples cycle through the manifest; each writes sparse and dense PFMs,
        a guide PNG and the sampled camera JSON.

        Returns:
            Index of written files per sample
        """
        sampler = sampler or CameraSampler()
        match_cfg = match_cfg or MatchConfig()
        pairs = load_rgbd_manifest(manifest_path)
        run_dir = Path(str(output_dir))
        run_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(seed)
        cache = {}
        index = []
        for i in range(int(count)):
            rgb_path, depth_path = pairs[i % len(pairs)]
            if (rgb_path, depth_path) not in cache:
                cache[(rgb_path, depth_path)] = (read_image(rgb_path), read_map(depth_path, kind='depth'))
            rgb, depth = cache[(rgb_path, depth_path)]
            sample = generate_training_sample(rgb, depth, sampler, model, match_cfg, rng)

            stem = run_dir / f"sample_{i:05d}"
            files = {
                'sparse': f"{stem}_sparse.pfm",
                'dense': f"{stem}_dense.pfm",
                'guide': f"{stem}_guide.png",
                'camera': f"{stem}_camera.json",
                'rgb': str(rgb_path),
                'depth': str(depth_path),
            }
            write_map(sample.sparse, files['sparse'])
            write_map(sample.dense, files['dense'])
            write_png8(files['guide'], sample.guide)
            write_json(files['camera'], sample.camera.to_dict())
            index.append(files)
        write_json(run_dir / 'index.json', {'seed': int(seed), 'model': model.to_dict(),
                                            'sampler': sampler.to_dict(), 'samples': index})
        logger.info(f"Generated {len(index)} training samples in {run_dir}")
        return {'samples': index}

    def format_run_summary(self, result: PipelineResult) -> str:
        """
        Format a pipeline result for display.

        Args:
            result: Output from run_pipeline

        Returns:
            Formatted string for display
        """
        lines = [f"Run directory: {result.run_dir}", f"Config hash: {result.config_hash}", ""]
        lines.append(f"{'':10}{'AI(1)':>10}{'AI(2)':>10}{'1-|rho|':>10}")
        for label, report in (('dense', result.dense_metrics), ('refined', result.refined_metrics)):
            flag = ' (degenerate)' if report.degenerate else ''
            lines.append(f"{label:10}{report.ai1:10.4f}{report.ai2:10.4f}"
                         f"{report.spearman_one_minus_abs:10.4f}{flag}")
        return '\n'.join(lines)

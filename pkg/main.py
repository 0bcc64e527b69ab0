#!/usr/bin/env python3
"""
Dual-Pixel Disparity Pipeline
Main entry point: one subcommand per stage plus the end-to-end pipeline.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config_manager import ConfigManager, configure_logging
from disparity_core import DPImagePair, DisparityMap
from error_model import fit_error_model, run_error_sweep
from evaluation import append_csv_row, evaluate
from exceptions import DPDisparityError, FileOperationError
from map_io import read_image, read_map, write_json, write_map, write_png8
from optics_simulator import simulate_dp
from pipeline_manager import PipelineManager, prepare_camera
from refinement import complete_sparse, refine_pipeline
from synthetic_scenes import available_scenes
from template_matching import edge_mask, template_match

logger = logging.getLogger(__name__)


def _section(global_config: Dict[str, Any], name: str, path: Optional[str], config_manager: ConfigManager):
    """Command-level JSON file wins over the matching section of the global --config."""
    if path:
        return config_manager.load_json(path)
    return global_config.get(name, {})


def cmd_simulate(args, global_config: Dict[str, Any], config_manager: ConfigManager, threads: int) -> int:
    camera_data = config_manager.load_json(args.camera)
    if args.pixel_pitch is not None:
        camera_data['pixel_pitch_m'] = args.pixel_pitch
    cam = prepare_camera(config_manager, camera_data, config_manager.load_match_config(global_config.get('match', {})))
    simulation = dict(global_config.get('simulation', {}))
    if args.noise_sigma is not None:
        simulation['noise_sigma'] = args.noise_sigma
    sim_cfg = config_manager.load_simulation_config(simulation, config_manager.pixel_pitch(camera_data))

    image = read_image(args.image)
    depth = read_map(args.depth, kind='depth')
    pair = simulate_dp(image, depth, cam, sim_cfg, seed=args.seed, threads=threads)
    write_map(DisparityMap(pair.left), args.out_left)
    write_map(DisparityMap(pair.right), args.out_right)
    print(f"✓ DP pair written to {args.out_left} and {args.out_right} (alpha {cam.alpha:.6g})")
    return 0


def cmd_match(args, global_config, config_manager, threads) -> int:
    match_cfg = config_manager.load_match_config(_section(global_config, 'match', args.stage_config, config_manager))
    left = read_image(args.left)
    right = read_image(args.right)
    pair = DPImagePair(left, right)
    mask = edge_mask(pair.left, match_cfg)
    sparse = template_match(pair, mask, match_cfg, threads=threads)
    write_map(sparse, args.out_disparity)
    if args.out_mask:
        write_png8(args.out_mask, mask.values)
    print(f"✓ {sparse.count_valid()} matched pixels written to {args.out_disparity}")
    return 0


def cmd_complete(args, global_config, config_manager, threads) -> int:
    fgs_cfg = config_manager.load_fgs_config(_section(global_config, 'fgs', args.stage_config, config_manager))
    tau = args.tau if args.tau is not None else float(global_config.get('completion', {}).get('tau', 8.0))
    sparse = read_map(args.sparse, kind='disparity')
    guide = read_image(args.guide)
    dense, confidence = complete_sparse(sparse, guide, fgs_cfg, tau)
    write_map(dense, args.out_dense)
    write_map(confidence, args.out_conf)
    print(f"✓ Dense disparity written to {args.out_dense}, confidence to {args.out_conf}")
    return 0


def cmd_refine(args, global_config, config_manager, threads) -> int:
    if args.stage_config:
        refine_cfg = config_manager.load_refine_config(args.stage_config)
    else:
        refine_cfg = config_manager.load_refine_config({'fgs': global_config.get('fgs', {}),
                                                        **global_config.get('refine', {})})
    dense = read_map(args.dense, kind='disparity')
    confidence = read_map(args.conf, kind='confidence')
    guide = read_image(args.guide)
    refined = refine_pipeline(dense, confidence, guide, refine_cfg)
    write_map(refined, args.out)
    print(f"✓ Refined disparity written to {args.out}")
    return 0


def cmd_eval(args, global_config, config_manager, threads) -> int:
    estimate = read_map(args.est, kind='disparity')
    gt_kind = args.gt_kind or global_config.get('evaluation', {}).get('gt_kind', 'inverse-depth')
    truth = read_map(args.gt, kind='depth' if args.gt_is_depth else 'disparity')
    crop = args.crop or global_config.get('evaluation', {}).get('crop')
    report = evaluate(estimate, truth, gt_kind, crop)
    write_json(args.out, report.to_dict())
    csv_path = args.csv or str(Path(args.out).with_suffix('.csv'))
    append_csv_row(report, csv_path, args.label or Path(args.est).stem)
    flag = " (degenerate)" if report.degenerate else ""
    print(f"AI(1) {report.ai1:.4f}  AI(2) {report.ai2:.4f}  1-|rho| {report.spearman_one_minus_abs:.4f}"
          f"  over {report.n_pixels} pixels{flag}")
    return 0


def cmd_fit_error_model(args, global_config, config_manager, threads) -> int:
    sweep = config_manager.load_sweep_config(args.sweep_config)
    records = run_error_sweep(sweep['z_list'], sweep['zf_list'], sweep['f_number_list'], sweep['sweep'],
                              seed=args.seed, threads=threads)
    if args.out_records:
        try:
            with open(args.out_records, 'w', encoding='utf-8', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(['z', 'z_f', 'F', 'sigma', 'n_samples'])
                for record in records:
                    writer.writerow([record.z, record.z_f, record.F, record.sigma_measured, record.n_samples])
        except OSError as e:
            raise FileOperationError(args.out_records, "cannot write sweep records", e)
    model = fit_error_model(records)
    write_json(args.out_model, model.to_dict())
    print(f"✓ Error model c1={model.c1:.4g} c2={model.c2:.4g} c3={model.c3:.4g} "
          f"(residual rms {model.residual_rms:.3g}) written to {args.out_model}")
    return 0


def cmd_datagen(args, global_config, config_manager, threads) -> int:
    model = config_manager.load_error_model(args.model or global_config.get('error_model'))
    pitch = config_manager.pixel_pitch(global_config.get('camera', {}))
    sampler = config_manager.load_camera_sampler(global_config.get('camera_sampler', {}), pitch)
    match_cfg = config_manager.load_match_config(global_config.get('match', {}))
    index = PipelineManager(config_manager, threads).run_datagen(
        args.manifest, model, args.count, args.out_dir, sampler, match_cfg, seed=args.seed)
    print(f"✓ {len(index['samples'])} training samples written to {args.out_dir}")
    return 0


def cmd_toy_experiment(args, global_config, config_manager, threads) -> int:
    manager = PipelineManager(config_manager, threads)
    match_cfg = config_manager.load_match_config(global_config.get('match', {}))
    result = manager.toy_experiment(seed=args.seed, output_dir=args.out_dir, size=args.size,
                                    disparity=args.disparity, noise_sigma=args.noise_sigma, match_cfg=match_cfg)
    print(f"Stereo within ±1 px: {result.stereo_within:.1%} of {result.stereo_pixels} pixels")
    print(f"DP within ±1 px:     {result.dp_within:.1%} of {result.dp_pixels} pixels")
    print(f"DP errors log-likelihood: Laplace {result.laplace_loglik:.1f}, Gaussian {result.gaussian_loglik:.1f}")
    print(f"✓ Histogram and summary written to {args.out_dir}")
    return 0


def cmd_pipeline(args, global_config, config_manager, threads) -> int:
    manager = PipelineManager(config_manager, threads)
    if args.manifest:
        result = manager.rerun_from_manifest(args.manifest, args.out_dir)
    else:
        overrides: Dict[str, Any] = {'seed': args.seed, 'threads': threads}
        if args.out_dir:
            overrides['output_dir'] = args.out_dir
        if args.camera:
            overrides['camera'] = args.camera
        if args.scene:
            overrides['scene'] = {'name': args.scene}
        if args.image or args.depth:
            overrides['inputs'] = {'image': args.image, 'depth': args.depth, 'guide': args.guide}
        config = config_manager.load_pipeline_config(global_config, overrides)
        result = manager.run_pipeline(config)
    print(manager.format_run_summary(result))
    return 0


COMMANDS = {
    'simulate': cmd_simulate,
    'match': cmd_match,
    'complete': cmd_complete,
    'refine': cmd_refine,
    'eval': cmd_eval,
    'fit-error-model': cmd_fit_error_model,
    'datagen': cmd_datagen,
    'toy-experiment': cmd_toy_experiment,
    'pipeline': cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dp-disparity',
                                     description='Dual-pixel disparity simulation, matching and refinement')
    parser.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    parser.add_argument('--threads', type=int, default=None,
                        help='Worker thread cap (default: DP_DISPARITY_THREADS or 1)')
    parser.add_argument('--config', help='JSON configuration; sections are named after the stages')
    parser.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR (default: DP_DISPARITY_LOG)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help='Render a DP pair from an image and a depth map')
    p.add_argument('--image', required=True)
    p.add_argument('--depth', required=True, help='Depth map in meters (PFM or PNG16)')
    p.add_argument('--camera', required=True, help='Camera JSON')
    p.add_argument('--pixel-pitch', type=float, help='Pixel pitch in meters (overrides the camera JSON)')
    p.add_argument('--noise-sigma', type=float)
    p.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='Overrides the global --seed')
    p.add_argument('--out-left', required=True)
    p.add_argument('--out-right', required=True)

    p = sub.add_parser('match', help='Template-match a DP pair on its edge mask')
    p.add_argument('--left', required=True)
    p.add_argument('--right', required=True)
    p.add_argument('--config', '--match-config', dest='stage_config', help='MatchConfig JSON')
    p.add_argument('--out-disparity', required=True)
    p.add_argument('--out-mask')

    p = sub.add_parser('complete', help='Densify a sparse disparity map')
    p.add_argument('--sparse', required=True)
    p.add_argument('--guide', required=True)
    p.add_argument('--config', '--fgs-config', dest='stage_config', help='FgsConfig JSON')
    p.add_argument('--tau', type=float)
    p.add_argument('--out-dense', required=True)
    p.add_argument('--out-conf', required=True)

    p = sub.add_parser('refine', help='Weighted median, confidence refiner and smoother')
    p.add_argument('--dense', required=True)
    p.add_argument('--conf', required=True)
    p.add_argument('--guide', required=True)
    p.add_argument('--config', '--refine-config', dest='stage_config',
                   help='Refinement JSON (top-level keys plus an fgs section)')
    p.add_argument('--out', required=True)

    p = sub.add_parser('eval', help='Affine-invariant metrics against ground truth')
    p.add_argument('--est', required=True)
    p.add_argument('--gt', required=True)
    p.add_argument('--gt-kind', choices=['inverse-depth', 'disparity'])
    p.add_argument('--gt-is-depth', action='store_true', help='Ground truth file holds depth in meters')
    p.add_argument('--crop', type=int, nargs=4, metavar=('X0', 'Y0', 'X1', 'Y1'))
    p.add_argument('--label')
    p.add_argument('--csv', help='CSV file to append to (default: --out with .csv suffix)')
    p.add_argument('--out', required=True)

    p = sub.add_parser('fit-error-model', help='Sweep the simulator and fit the matching error model')
    p.add_argument('--sweep-config', required=True)
    p.add_argument('--seed', type=int, default=argparse.SUPPRESS, help='Overrides the global --seed')
    p.add_argument('--out-model', required=True)
    p.add_argument('--out-records', help='Optional CSV of the measured sweep')

    p = sub.add_parser('datagen', help='Generate noisy sparse training samples from RGB-D pairs')
    p.add_argument('--manifest', required=True, help='CSV of rgb,depth paths')
    p.add_argument('--model', help='Error model JSON (default: reference constants)')
    p.add_argument('--count', type=int, required=True)
    p.add_argument('--out-dir', required=True)

    p = sub.add_parser('toy-experiment', help='Stereo versus DP matching on a random-dot chart')
    p.add_argument('--out-dir', required=True)
    p.add_argument('--size', type=int, default=256)
    p.add_argument('--disparity', type=float, default=5.0)
    p.add_argument('--noise-sigma', type=float, default=0.01)

    p = sub.add_parser('pipeline', help='Run every stage end to end')
    p.add_argument('--manifest', help='Re-run from an earlier manifest.json')
    p.add_argument('--out-dir')
    p.add_argument('--camera', help='Camera JSON')
    p.add_argument('--scene', choices=available_scenes())
    p.add_argument('--image')
    p.add_argument('--depth')
    p.add_argument('--guide')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main function; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        config_manager = ConfigManager()
        threads = config_manager.get_threads(args.threads)
        global_config = config_manager.load_json(args.config) if args.config else {}
        if args.command == 'pipeline' and not args.manifest and not (args.out_dir or global_config.get('output_dir')):
            print("Error: pipeline needs --out-dir (or output_dir in --config)", file=sys.stderr)
            return 2
        return COMMANDS[args.command](args, global_config, config_manager, threads)
    except DPDisparityError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\nExiting...", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
navnet command line
Corpus generation, training, evaluation, benchmarking, gradient checks and
architecture comparison
"""

import os
import sys


def _pin_blas_threads(argv):
    """BLAS pools read these at import time, so this runs before numpy loads"""
    if '--deterministic' in argv:
        for var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS', 'VECLIB_MAXIMUM_THREADS'):
            os.environ[var] = '1'


_pin_blas_threads(sys.argv[1:])

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Dict, List, Optional  # noqa: E402

import config  # noqa: E402
import report_templates as reports  # noqa: E402
from dataset_manager import DatasetManager  # noqa: E402
from expert_oracle import DatasetGenerationError, audit_dataset, build_dataset, build_dataset_from_images  # noqa: E402
from models import ARCHS, ModelSpec, model_gradient_check  # noqa: E402
from rendering import plot_training_curves, render_trajectory_overlay, render_value_map, value_contrast  # noqa: E402
from run_manager import RunManager  # noqa: E402
from tensor_nn import CheckpointError, ShapeError, layer_gradient_checks  # noqa: E402
from terrain_synth import default_terrain_params, load_terrain_pair  # noqa: E402
from train_eval import OraclePolicy, TrainConfig, bench_epoch, evaluate, rollout, train  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1

# flag dest -> RunConfig field
FLAG_FIELDS = {
    'maps': 'n_maps',
    'traj': 'trajectories_per_map',
    'size': 'image_size',
    'goal_mode': 'goal_mode',
    'risk_fraction': 'risk_fraction',
    'seed': 'seed',
    'workers': 'workers',
    'deterministic': 'deterministic',
    'arch': 'arch_id',
    'epochs': 'epochs',
    'lr': 'lr',
    'l2_lambda': 'l2_lambda',
    'l2_squared': 'l2_squared',
    'batch': 'batch_size',
    'k': 'vin_iterations',
    'data': 'dataset_dir',
}


def build_run_config(args: argparse.Namespace) -> config.RunConfig:
    """Defaults < --full-scale < --config file < explicit flags"""
    run = config.RunConfig()
    if getattr(args, 'full_scale', False):
        run = config.full_scale(run)
    if getattr(args, 'config', None):
        with open(args.config, 'r', encoding='utf-8') as f:
            run = run.merged(json.load(f))
    overrides = {field: getattr(args, dest, None) for dest, field in FLAG_FIELDS.items()}
    if overrides.get('deterministic') is False:
        overrides['deterministic'] = None
    if overrides.get('l2_squared') is False:
        overrides['l2_squared'] = None
    if getattr(args, 'out', None):
        overrides['out_dir'] = args.out
    return run.merged(overrides)


def _load_splits(data_dir: str):
    manager = DatasetManager(data_dir)
    if not manager.exists():
        raise FileNotFoundError(f"No dataset at {data_dir}; run gen-data first")
    manifest = manager.load_manifest()
    return manager, manifest, manager.load_samples(manifest, 'train'), manager.load_samples(manifest, 'test')


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate or ingest the corpus and audit its labels"""
    run = build_run_config(args)
    out = args.out or run.dataset_dir
    manager = DatasetManager(out)

    if args.ingest:
        pairs = []
        for gray_png in sorted(Path(args.ingest).glob('*_gray.png')):
            name = gray_png.name[:-len('_gray.png')]
            mask_png = gray_png.with_name(f"{name}_mask.png")
            if not mask_png.exists():
                raise FileNotFoundError(f"Missing mask for {gray_png.name}: expected {mask_png.name}")
            pairs.append((name, load_terrain_pair(gray_png, mask_png)))
        manifest = build_dataset_from_images(pairs, run.trajectories_per_map, run.seed, run.cell_size,
                                             run.risk_fraction, run.goal_mode)
        for entry in manifest.maps:
            manager.save_map(entry, manifest.cell_size, manifest.goal_mode)
    else:
        params = default_terrain_params(run.image_size, cell_size=run.cell_size, **run.terrain)
        manifest = build_dataset(
            params, run.n_maps, run.trajectories_per_map, run.seed,
            risk_fraction=run.risk_fraction,
            goal_mode=run.goal_mode,
            workers=run.effective_workers(),
            sink=lambda entry: manager.save_map(entry, params.cell_size, run.goal_mode),
        )

    digest = manager.save_manifest(manifest)
    RunManager(out).save_config(run.merged({'dataset_dir': out}))
    mismatches = audit_dataset(manifest)
    print(reports.GEN_DATA_REPORT.format(out=out, digest=digest, **manifest.counts()))
    return EXIT_OK if mismatches == 0 else EXIT_FAILURE


def cmd_train(args: argparse.Namespace) -> int:
    """Train one architecture and save the run"""
    run = build_run_config(args)
    _, manifest, train_set, test_set = _load_splits(run.dataset_dir)
    if args.size is not None and args.size != manifest.image_size:
        raise ValueError(f"--size {args.size} does not match the dataset's {manifest.image_size}px images")

    runs = RunManager(run.out_dir)
    runs.save_config(run.merged({'image_size': manifest.image_size}))
    cfg = TrainConfig.from_run_config(run, random_starts=args.random_starts)
    model, record = train(cfg, train_set, test_set)
    runs.save_checkpoint(model)
    runs.save_metrics(record, deterministic=run.deterministic)
    plot_training_curves({record.arch_id: record}, runs.run_dir / 'curves.png')

    last = record.epochs[-1]
    best = record.best
    print(reports.TRAIN_REPORT.format(
        arch_id=record.arch_id, epochs=len(record.epochs), best_epoch=record.best_epoch, loss=last.loss,
        train_acc=best.train_acc, test_acc=best.test_acc, train_succ=reports.format_rate(record.train_succ),
        test_succ=reports.format_rate(record.test_succ), out=runs.run_dir,
    ))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Score a checkpoint or the oracle and render images"""
    run = build_run_config(args)
    manager, manifest, train_set, test_set = _load_splits(run.dataset_dir)
    out = RunManager(args.out or args.run or run.out_dir)

    if args.oracle:
        model = OraclePolicy()
        source = 'expert oracle'
    else:
        if not args.run:
            raise ValueError("eval needs --run DIR with a checkpoint, or --oracle")
        model = RunManager(args.run).load_checkpoint(args.arch)
        if model.spec.image_size != manifest.image_size:
            raise CheckpointError(f"Checkpoint expects {model.spec.image_size}px input, "
                                  f"dataset has {manifest.image_size}px")
        source = f"{model.spec.arch_id} from {args.run}"

    results = evaluate(model, train_set, test_set, random_starts=args.random_starts, seed=run.seed)
    out.save_json(out.eval_file.name, results)
    print(reports.EVAL_REPORT.format(source=source, **results))
    contrast = value_contrast(model, test_set)
    out.save_json('value_contrast.json', contrast)
    print(reports.VALUE_CONTRAST_REPORT.format(lighter=contrast['lighter'], maps=contrast['maps']))
    print(json.dumps(results, sort_keys=True))

    entries = {m.map_id: m for m in manifest.maps}
    starts = [(e, start) for e, cells in enumerate(test_set.starts) for start in cells]
    for i, (e, start) in enumerate(starts[:args.render_trajectories]):
        world = test_set.worlds[e]
        terrain = manager.load_terrain(entries[world.source_map_id])
        positions, ok = rollout(model, world, start, encoding=test_set.encodings[e])
        image = render_trajectory_overlay(terrain, positions, manifest.cell_size, goal=world.goal)
        out.save_image(f"traj_{i:03d}_{world.source_map_id}_{'ok' if ok else 'fail'}.png", image)
    for i in range(min(args.render_values, len(test_set.worlds))):
        world = test_set.worlds[i]
        terrain = manager.load_terrain(entries[world.source_map_id])
        image = render_value_map(model, terrain, world.goal, manifest.cell_size, world, upscale=True)
        out.save_image(f"value_{i:03d}_{world.source_map_id}.png", image)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    """Seconds per epoch for dbnet against vin"""
    run = build_run_config(args)
    _, manifest, train_set, _ = _load_splits(run.dataset_dir)
    timings = {}
    for arch in ('dbnet', 'vin'):
        spec = ModelSpec(arch_id=arch, image_size=manifest.image_size, vin_iterations=run.vin_iterations)
        timings[arch] = bench_epoch(spec, train_set, run.batch_size, run.seed)
    ratio = timings['dbnet'] / timings['vin']
    report = {
        'dbnet_seconds': timings['dbnet'],
        'vin_seconds': timings['vin'],
        'vin_iterations': run.vin_iterations,
        'batch_size': run.batch_size,
        'samples': len(train_set),
        'ratio': ratio,
    }
    if args.out:
        RunManager(args.out).save_json('bench.json', report)
    print(reports.BENCH_REPORT.format(samples=len(train_set), batch_size=run.batch_size, dbnet=timings['dbnet'],
                                      vin=timings['vin'], k=run.vin_iterations, ratio=ratio,
                                      reduction=(1.0 - ratio) * 100.0))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of every layer and architecture"""
    seed = args.seed if args.seed is not None else config.SEED
    results = dict(layer_gradient_checks(args.samples, args.tolerance, seed, inject_bug=args.inject_bug))
    for arch in ARCHS:
        results[arch] = model_gradient_check(arch, args.samples, args.tolerance, seed)

    passed = True
    for name, report in results.items():
        passed &= report.passed
        print(reports.GRADCHECK_ROW.format(status='ok' if report.passed else 'FAIL', name=name,
                                           error=report.overall_max()))
        if not report.passed:
            for tensor, index, analytic, numeric, error in report.worst:
                print(reports.GRADCHECK_WORST.format(tensor=tensor, index=index, analytic=analytic,
                                                     numeric=numeric, error=error))
    if args.out:
        RunManager(args.out).save_json('gradcheck.json', {
            name: {'passed': r.passed, 'max_error': r.max_error, 'worst': r.worst} for name, r in results.items()
        })
    if not passed:
        logger.error("Gradient check failed")
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_compare(args: argparse.Namespace) -> int:
    """Train several architectures on the same data and tabulate them"""
    run = build_run_config(args)
    _, manifest, train_set, test_set = _load_splits(run.dataset_dir)
    archs = [a.strip() for a in args.archs.split(',') if a.strip()]
    unknown = [a for a in archs if a not in ARCHS]
    if unknown:
        raise ValueError(f"Unknown architectures: {', '.join(unknown)}")

    runs = RunManager(run.out_dir)
    runs.save_config(run.merged({'image_size': manifest.image_size}))
    records = {}
    table: Dict[str, Any] = {}
    for arch in archs:
        cfg = TrainConfig.from_run_config(run, arch_id=arch, random_starts=args.random_starts)
        model, record = train(cfg, train_set, test_set)
        arch_runs = RunManager(str(runs.run_dir / arch))
        arch_runs.save_checkpoint(model)
        arch_runs.save_metrics(record, deterministic=run.deterministic)
        records[arch] = record
        best = record.best
        table[arch] = {
            'train_acc': best.train_acc,
            'test_acc': best.test_acc,
            'train_succ': record.train_succ,
            'test_succ': record.test_succ,
            'epoch_seconds': None if run.deterministic else record.mean_epoch_seconds(),
            'value_lighter': value_contrast(model, test_set)['fraction'],
        }
    runs.save_json('comparison.json', table)
    plot_training_curves(records, runs.run_dir / 'curves.png')

    print(reports.COMPARISON_HEADER.format(arch='arch', train_acc='train_acc', test_acc='test_acc',
                                           train_succ='train_succ', test_succ='test_succ', seconds='s/epoch',
                                           lighter='lighter'))
    for arch, row in table.items():
        seconds = 'n/a' if row['epoch_seconds'] is None else f"{row['epoch_seconds']:.2f}"
        print(reports.COMPARISON_ROW.format(arch=arch, train_acc=row['train_acc'], test_acc=row['test_acc'],
                                            train_succ=row['train_succ'], test_succ=row['test_succ'],
                                            seconds=seconds,
                                            lighter=reports.format_rate(row['value_lighter'])))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--log-level', default=None, help="Logging level (default NAVNET_LOG_LEVEL)")
    common.add_argument('--workers', type=int, default=None, help="Worker processes for data generation")
    common.add_argument('--config', default=None, help="JSON file overriding built-in defaults")
    common.add_argument('--seed', type=int, default=None, help="Global seed")
    common.add_argument('--deterministic', action='store_true', help="Single worker, single BLAS thread")
    common.add_argument('--full-scale', action='store_true', help="128px images and 10000 maps")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument('--data', default=None, help="Dataset directory")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument('--epochs', type=int, default=None)
    training.add_argument('--lr', type=float, default=None)
    training.add_argument('--lambda', dest='l2_lambda', type=float, default=None, help="L2 weight")
    training.add_argument('--l2-squared', action='store_true', help="Use lambda*||theta||^2")
    training.add_argument('--batch', type=int, default=None)
    training.add_argument('--k', type=int, default=None, help="VIN iterations")
    training.add_argument('--random-starts', action='store_true', help="Success rate from fresh random starts")

    parser = argparse.ArgumentParser(prog='navnet', description="Double-branch navigation network toolkit")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help="Generate the expert trajectory corpus")
    p.add_argument('--maps', type=int, default=None)
    p.add_argument('--traj', type=int, default=None)
    p.add_argument('--size', type=int, default=None)
    p.add_argument('--goal-mode', choices=('shared', 'per_trajectory'), default=None)
    p.add_argument('--risk-fraction', type=float, default=None)
    p.add_argument('--ingest', default=None, help="Directory of *_gray.png / *_mask.png pairs")
    p.add_argument('--out', default=None, help="Dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', parents=[common, data, training], help="Train one architecture")
    p.add_argument('--arch', choices=ARCHS, default=None)
    p.add_argument('--size', type=int, default=None, help="Expected image size of the dataset")
    p.add_argument('--out', default=None, help="Run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', parents=[common, data], help="Evaluate a checkpoint or the oracle")
    p.add_argument('--run', default=None, help="Run directory holding checkpoint.bin")
    p.add_argument('--arch', choices=ARCHS, default=None, help="Expected checkpoint architecture")
    p.add_argument('--oracle', action='store_true', help="Evaluate the expert oracle")
    p.add_argument('--render-trajectories', type=int, default=0)
    p.add_argument('--render-values', type=int, default=0)
    p.add_argument('--random-starts', action='store_true')
    p.add_argument('--out', default=None, help="Output directory (default: the run directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('bench', parents=[common, data], help="Seconds per epoch, dbnet vs vin")
    p.add_argument('--batch', type=int, default=None)
    p.add_argument('--k', type=int, default=None, help="VIN iterations")
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('gradcheck', parents=[common], help="Finite-difference gradient checks")
    p.add_argument('--samples', type=int, default=100, help="Coordinates per tensor")
    p.add_argument('--tolerance', type=float, default=1e-3)
    p.add_argument('--inject-bug', action='store_true', help="Double the conv gradients (must fail)")
    p.add_argument('--out', default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('compare', parents=[common, data, training], help="Train several architectures")
    p.add_argument('--archs', default='dbnet,vin,b1net,b2net')
    p.add_argument('--out', default=None, help="Run directory")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=(args.log_level or config.LOG_LEVEL).upper(), format=config.LOG_FORMAT)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, DatasetGenerationError, ShapeError, CheckpointError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())

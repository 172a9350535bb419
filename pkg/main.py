#!/usr/bin/env python3
"""
RHRSegNet command-line entry point
Synthetic data generation, training, evaluation, inference and relight ablation
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from dotenv import load_dotenv

from config import apply_overrides, get_settings, load_experiment_config
from data import (SegmentationDataset, center_crop, index_dataset, layout_template, normalize_image,
                  read_image, save_prediction, synth_generate)
from errors import CheckpointError, RHRSegError, ShapeError
from hrseg import INPUT_MULTIPLE
from logging_system import log_command_context, log_shutdown, log_startup, seg_logger
from metrics import predict_labels, report_table, report_to_record
from relight import export_preview
from training import ablation_run, evaluate, fit, load_checkpoint, make_run_dir

load_dotenv()


# ===== COMMANDS =====

def cmd_synth(args) -> int:
    manifest = {}
    val_pairs = args.pairs if args.val_pairs is None else args.val_pairs
    for split, pairs in (('train', args.pairs), ('val', val_pairs)):
        samples = synth_generate(Path(args.out), pairs, args.size, args.classes,
                                 args.seed, args.night, split=split)
        manifest[split] = [s.image_path.name for s in samples]
    print(json.dumps({'root': str(args.out), 'size': args.size, 'classes': args.classes,
                      'night': args.night, 'seed': args.seed,
                      'splits': {k: len(v) for k, v in manifest.items()}}, indent=2))
    return 0


def _experiment(args):
    cfg = load_experiment_config(Path(args.config))
    if args.override:
        cfg = apply_overrides(cfg, args.override)
    run_root = Path(args.run_root) if args.run_root else get_settings().run_root
    return cfg, run_root


def cmd_train(args) -> int:
    cfg, run_root = _experiment(args)
    run_dir = make_run_dir(run_root, cfg)
    result = fit(cfg, run_dir, args.override or [], args.workers)
    print(f"✓ Run directory: {result.run_dir}")
    print(f"  final checkpoint: {result.final_checkpoint}")
    if result.final_miou is not None:
        print(f"  final mIoU: {100.0 * result.final_miou:.2f}")
    return 0


def cmd_eval(args) -> int:
    loaded = load_checkpoint(Path(args.checkpoint))
    source = loaded.config.train.source
    root = Path(args.data) if args.data else source.root
    layout = args.layout or source.layout
    taxonomy = layout_template(layout).taxonomy
    if taxonomy.num_classes != loaded.pipeline.num_classes:
        raise CheckpointError(
            f"checkpoint predicts {loaded.pipeline.num_classes} classes but the "
            f"{layout} taxonomy has {taxonomy.num_classes}")

    dataset = SegmentationDataset(index_dataset(root, layout, args.split), taxonomy,
                                  loaded.config.train.aug, train=False,
                                  eval_crop=loaded.config.train.eval_crop)
    _, report = evaluate(loaded.pipeline, dataset, 1, args.workers or 0)

    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}.json"
    out.write_text(json.dumps(report_to_record(report), indent=2))
    print(report_table(f"{layout}/{args.split}", report))
    print(f"✓ Report written to {out}")
    return 0


def _prepare(image: np.ndarray, auto_pad: bool, mean):
    height, width = image.shape[:2]
    if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
        if not auto_pad:
            raise ShapeError(
                f"image is {height}x{width}; dimensions must be divisible by {INPUT_MULTIPLE} "
                f"(pass --auto-pad to pad)")
        image, _ = center_crop(image, None, None, mean, multiple=INPUT_MULTIPLE)
    return image, height, width


def cmd_infer(args) -> int:
    loaded = load_checkpoint(Path(args.checkpoint))
    pipeline = loaded.pipeline
    aug = loaded.config.train.aug
    taxonomy = layout_template(loaded.config.train.source.layout).taxonomy
    out_dir = Path(args.out)

    failures = 0
    for image_path in map(Path, args.images):
        try:
            image, height, width = _prepare(read_image(image_path), args.auto_pad, aug.normalize_mean)
            batch = normalize_image(image, aug.normalize_mean, aug.normalize_std).unsqueeze(0)
            with torch.no_grad():
                pred = predict_labels(pipeline(batch))[0, :height, :width]
                save_prediction(pred.numpy(), out_dir, image_path.stem, taxonomy)
                if args.relight_preview:
                    relit = pipeline.relit(batch)[0, :, :height, :width]
                    export_preview(relit, out_dir / f"{image_path.stem}_relit.png",
                                   aug.normalize_mean, aug.normalize_std)
            print(f"✓ {image_path}")
        except (RHRSegError, OSError) as e:
            failures += 1
            seg_logger.log_error(None, e, f"infer: {image_path}")
            print(f"✗ {image_path}: {e}", file=sys.stderr)

    return 1 if failures else 0


def cmd_ablate(args) -> int:
    cfg, run_root = _experiment(args)
    run_dir = make_run_dir(run_root, cfg)
    report = ablation_run(cfg, run_dir, args.override or [], args.workers)
    for key, run in report['runs'].items():
        print(f"  {key}: final mIoU {100.0 * run['final_miou']:.2f}")
    print(f"✓ delta (with - without): {100.0 * report['delta']:+.2f}")
    print(f"  report: {run_dir / 'ablation_report.json'}")
    return 0


# ===== ARGUMENTS =====

def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog='rhrseg', description='Relighting + multi-resolution segmentation')
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', help='generate a synthetic segmentation dataset')
    synth.add_argument('--out', required=True)
    synth.add_argument('--pairs', type=int, default=16)
    synth.add_argument('--val-pairs', type=int, default=None, help='defaults to --pairs')
    synth.add_argument('--size', type=int, default=64)
    synth.add_argument('--classes', type=int, default=4)
    synth.add_argument('--night', action='store_true')
    synth.add_argument('--seed', type=int, default=0)
    synth.set_defaults(handler=cmd_synth)

    for name, handler, help_text in (('train', cmd_train, 'train from an experiment config'),
                                     ('ablate', cmd_ablate, 'paired runs with and without relighting')):
        command = sub.add_parser(name, help=help_text)
        command.add_argument('config')
        command.add_argument('--override', action='append', default=[], metavar='KEY=VALUE')
        command.add_argument('--run-root', default=None, help=f'defaults to {settings.run_root}')
        command.add_argument('--workers', type=int, default=settings.workers)
        command.set_defaults(handler=handler)

    evaluate_cmd = sub.add_parser('eval', help='evaluate a checkpoint on a dataset split')
    evaluate_cmd.add_argument('checkpoint')
    evaluate_cmd.add_argument('--data', default=None, help='dataset root; defaults to the training source')
    evaluate_cmd.add_argument('--layout', default=None)
    evaluate_cmd.add_argument('--split', default='val')
    evaluate_cmd.add_argument('--out', default=None)
    evaluate_cmd.add_argument('--workers', type=int, default=settings.workers)
    evaluate_cmd.set_defaults(handler=cmd_eval)

    infer = sub.add_parser('infer', help='segment individual images')
    infer.add_argument('checkpoint')
    infer.add_argument('images', nargs='+')
    infer.add_argument('--out', required=True)
    infer.add_argument('--auto-pad', action='store_true')
    infer.add_argument('--relight-preview', action='store_true')
    infer.set_defaults(handler=cmd_infer)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log_startup(args.command)
    exit_code = 1
    try:
        with log_command_context(None, args.command):
            exit_code = args.handler(args)
    except (RHRSegError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        exit_code = 2
    finally:
        log_shutdown(exit_code)
    return exit_code


if __name__ == "__main__":
    sys.exit(main())

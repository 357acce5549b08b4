#!/usr/bin/env python3
"""
EmambaIR command line interface

  simulate --config <file> --out <dir>
  train    --config <file> --out <dir> [--resume <ckpt>] [--stop-step N]
  eval     --config <file> --ckpt <ckpt> --data <dir> --out <dir>
  ablate-k --config <file> --k 1,2,4,8,16 --out <dir> [--dense] [--seeds 0,1,2]
  ablate-modules --config <file> --out <dir> [--variants rlfb_only,full]

EMAMBAIR_SEED overrides the configured seed. Exit status is 1 on any failure.
"""

import argparse
import logging
import sys
from typing import List, Optional

from pipeline_validator import validate_before_pipeline
from run_config import load_run_config
from synthetic_data import write_dataset
from trainer import Trainer, ablate_k, ablate_modules
from validation_utils import ValidationError, handle_validation_error

logger = logging.getLogger(__name__)


def _parse_int_list(raw: str, flag: str, error_code: str, minimum: Optional[int] = None) -> List[int]:
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ValidationError(f"{flag} expects comma-separated integers, got '{raw}'",
                              error_code=error_code, category=ValidationError.CONFIG_ERROR)
    if not values or (minimum is not None and any(v < minimum for v in values)):
        raise ValidationError(f"{flag} values must be >= {minimum}, got '{raw}'" if values
                              else f"{flag} is empty", error_code=error_code,
                              category=ValidationError.CONFIG_ERROR)
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='EmambaIR - event-guided image restoration toolkit')
    parser.add_argument('-v', '--verbose', action='store_true', help='Verbose logging')
    commands = parser.add_subparsers(dest='mode', required=True)

    def common(sub):
        sub.add_argument('--config', help='YAML run configuration')
        sub.add_argument('--out', required=True, help='Output directory')
        sub.add_argument('--seed', type=int, help='Override the configured seed')
        return sub

    common(commands.add_parser('simulate', help='Write a synthetic dataset directory'))

    train = common(commands.add_parser('train', help='Train a model'))
    train.add_argument('--resume', help='Checkpoint to resume from')
    train.add_argument('--steps', type=int, help='Override the configured step count')
    train.add_argument('--stop-step', type=int, help='Stop after this many total steps (resumable)')

    evaluate = common(commands.add_parser('eval', help='Evaluate a checkpoint'))
    evaluate.add_argument('--ckpt', required=True, help='Checkpoint file')
    evaluate.add_argument('--data', help='Dataset directory written by simulate')

    ablate = common(commands.add_parser('ablate-k', help='Sweep the top-k retention count'))
    ablate.add_argument('--k', required=True, help='Comma-separated k values, e.g. 1,2,4,8,16')
    ablate.add_argument('--dense', action='store_true', help='Append a dense-attention row')
    ablate.add_argument('--seeds', help='Comma-separated seeds to average over, e.g. 0,1,2')
    ablate.add_argument('--steps', type=int, help='Override the configured step count')

    modules = common(commands.add_parser('ablate-modules', help='Compare TSAM/GSSM on-off variants'))
    modules.add_argument('--variants', help='Comma-separated subset of rlfb_only,gssm_only,tsam_only,full')
    modules.add_argument('--steps', type=int, help='Override the configured step count')
    return parser


def run(args: argparse.Namespace) -> None:
    overrides = {'mode': args.mode, 'out_dir': args.out, 'seed': args.seed,
                 'steps': getattr(args, 'steps', None)}
    if args.mode == 'eval':
        overrides.update({'checkpoint': args.ckpt, 'data.data_dir': args.data})
    config = load_run_config(args.config, overrides)
    resume = getattr(args, 'resume', None)

    if not validate_before_pipeline(config, verbose=args.verbose, resume=resume):
        raise ValidationError("Pre-flight validation failed", error_code="PREFLIGHT_FAILED",
                              severity=ValidationError.CRITICAL, step="Pre-flight")

    if args.mode == 'simulate':
        write_dataset(config.data, config.seed, config.out_dir)
    elif args.mode == 'train':
        checkpoint, report = Trainer(config).train(resume=resume, stop_step=args.stop_step)
        print(report.to_text())
    elif args.mode == 'eval':
        report = Trainer(config).evaluate(config.checkpoint)
        print(report.to_text())
    elif args.mode == 'ablate-k':
        seeds = _parse_int_list(args.seeds, "--seeds", "INVALID_SEED", minimum=0) if args.seeds else None
        table = ablate_k(config, _parse_int_list(args.k, "--k", "INVALID_K", minimum=1),
                         include_dense=args.dense, seeds=seeds)
        print(table.to_string(index=False))
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else None
        table = ablate_modules(config, variants)
        print(table.to_string(index=False))


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        run(args)
    except ValidationError as e:
        handle_validation_error(e, logger)
        return 1
    except Exception as e:
        logger.error(f"❌ Unexpected error: {e}")
        if args.verbose:
            logger.exception("Traceback:")
        return 1
    logger.info(f"🎉 {args.mode} finished")
    return 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Pipeline Pre-flight Validator for the EmambaIR harness
Checks a run configuration before any simulation, training or evaluation starts
"""

import logging
import shutil
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

from checkpoint import Checkpoint
from run_config import RunConfig, load_run_config
from synthetic_data import read_manifest
from validation_utils import ValidationError

logger = logging.getLogger(__name__)

MIN_FREE_MB = 100


class PipelineValidator:
    """
    Staged pre-flight checks for one run

    Stages: config invariants, dataset directory, checkpoint, output directory.
    Critical problems raise ValidationError; everything else lands in the report.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.validation_results = []

    def _record(self, stage: str, status: str, message: str) -> None:
        self.validation_results.append({'stage': stage, 'status': status, 'message': message})

    def validate_complete_pipeline(self, resume: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
        """
        Run every stage relevant to config.mode

        Args:
            resume: checkpoint a training run will continue from

        Returns:
            Validation report dict

        Raises:
            ValidationError: If a critical check fails
        """
        logger.info(f"🔍 Starting pre-flight validation for mode '{self.config.mode}'...")

        # Stage 1: configuration invariants
        self._validate_config()

        # Stage 2: dataset directory
        if self.config.mode == "eval" or self.config.data.data_dir:
            self._validate_dataset()

        # Stage 3: checkpoint
        if self.config.mode == "eval":
            self._validate_checkpoint(self.config.checkpoint, required=True)
        elif resume is not None:
            self._validate_checkpoint(resume, required=True)

        # Stage 4: output directory and disk space
        self._validate_output_dir()

        report = {
            'status': 'PASSED',
            'mode': self.config.mode,
            'out_dir': self.config.out_dir,
            'validation_results': self.validation_results,
            'timestamp': datetime.now().isoformat()
        }
        if any(r['status'] == 'WARNING' for r in self.validation_results):
            report['status'] = 'PASSED_WITH_WARNINGS'

        logger.info("✅ Pre-flight validation completed")
        return report

    def _validate_config(self):
        """Stage 1: configuration invariants"""
        logger.debug("Stage 1: configuration validation")
        try:
            self.config.validate()
        except ValidationError as e:
            e.severity = ValidationError.CRITICAL
            e.step = e.step or "Pre-flight"
            raise
        model = self.config.model
        self._record('config', 'PASSED',
                     f"{model.levels} levels, widths {model.widths}, k {model.ks}, crop {self.config.crop_size}")
        if self.config.steps == 0 and self.config.mode == "train":
            self._record('config', 'WARNING', "steps is 0: the checkpoint will equal the initialization")
        if self.config.schedule_steps < self.config.steps:
            self._record('config', 'INFO',
                         f"Schedule horizon {self.config.schedule_steps} is shorter than the run; "
                         f"the rate stays at lr_min afterwards")

    def _validate_dataset(self):
        """Stage 2: dataset directory"""
        logger.debug("Stage 2: dataset validation")
        data_dir = self.config.data.data_dir
        if not data_dir:
            self._record('dataset', 'INFO', "No data_dir set; pairs will be generated in memory")
            return
        try:
            manifest = read_manifest(data_dir)
        except ValidationError as e:
            raise ValidationError(
                f"Dataset directory unusable: {e.args[0]}",
                error_code="DATASET_VALIDATION_FAILED",
                severity=ValidationError.CRITICAL,
                category=ValidationError.DATA_ERROR,
                suggestions=["Run 'simulate --out <dir>' and point data.data_dir at it"],
                step="Pre-flight"
            )
        missing = [
            f"{entry['name']}{suffix}"
            for entry in manifest['pairs']
            for suffix in ("_blurry.etsr", "_sharp.etsr", "_events.csv")
            if not (Path(data_dir) / f"{entry['name']}{suffix}").exists()
        ]
        if missing:
            raise ValidationError(
                f"Dataset files missing: {', '.join(missing[:5])}",
                error_code="DATASET_INCOMPLETE",
                severity=ValidationError.CRITICAL,
                category=ValidationError.DATA_ERROR,
                step="Pre-flight"
            )
        for side in ("width", "height"):
            if manifest.get(side, 0) % self.config.model.divisor:
                raise ValidationError(
                    f"Dataset {side} {manifest[side]} not divisible by {self.config.model.divisor}",
                    error_code="DIVISIBILITY_VIOLATION",
                    severity=ValidationError.CRITICAL,
                    category=ValidationError.SHAPE_ERROR,
                    step="Pre-flight"
                )
        self._record('dataset', 'PASSED', f"{len(manifest['pairs'])} pairs in {data_dir}")

    def _validate_checkpoint(self, path: Optional[Union[str, Path]], required: bool):
        """Stage 3: checkpoint presence and compatibility"""
        logger.debug("Stage 3: checkpoint validation")
        if not path:
            if required:
                raise ValidationError(
                    "No checkpoint given",
                    error_code="MISSING_CHECKPOINT",
                    severity=ValidationError.CRITICAL,
                    category=ValidationError.CONFIG_ERROR,
                    suggestions=["Pass --ckpt or set 'checkpoint' in the config"],
                    step="Pre-flight"
                )
            return
        checkpoint = Checkpoint.load(path)
        if self.config.mode == "train" and checkpoint.model_config != self.config.model:
            raise ValidationError(
                f"Checkpoint {path} was trained with a different model config",
                error_code="INCOMPATIBLE_CHECKPOINT",
                severity=ValidationError.CRITICAL,
                category=ValidationError.CONFIG_ERROR,
                step="Pre-flight"
            )
        self._record('checkpoint', 'PASSED', f"{Path(path).name}: step {checkpoint.step}, "
                                             f"{len(checkpoint.params)} tensors")

    def _validate_output_dir(self):
        """Stage 4: output directory and disk space"""
        logger.debug("Stage 4: output directory validation")
        output_dir = Path(self.config.out_dir)
        if not output_dir.exists():
            try:
                output_dir.mkdir(parents=True, exist_ok=True)
                self._record('output', 'INFO', f"Created output directory: {output_dir}")
            except OSError:
                raise ValidationError(
                    f"Cannot create output directory: {output_dir}",
                    error_code="OUTPUT_DIR_CREATION_FAILED",
                    severity=ValidationError.CRITICAL,
                    category=ValidationError.FILE_ERROR,
                    suggestions=["Check write permissions", "Choose a different --out directory"],
                    step="Pre-flight"
                )

        try:
            free_space = shutil.disk_usage(output_dir).free / (1024 * 1024)
        except OSError:
            self._record('output', 'INFO', 'Could not check disk space - proceeding anyway')
            return
        if free_space < MIN_FREE_MB:
            self._record('output', 'WARNING',
                         f'Low disk space: {free_space:.1f}MB free (recommended: >{MIN_FREE_MB}MB)')
        else:
            self._record('output', 'PASSED', f'Sufficient disk space: {free_space:.1f}MB free')

    def print_validation_report(self, report: Dict[str, Any]):
        """Print formatted validation report"""
        print("\n" + "=" * 60)
        print("📋 PRE-FLIGHT VALIDATION REPORT")
        print("=" * 60)
        print(f"🎛️  Mode: {report['mode']}")
        print(f"📁 Output: {report['out_dir']}")
        print(f"⏰ Validation Time: {report['timestamp']}")
        print("\n🔍 Validation Results:")

        for result in report['validation_results']:
            status_icon = {
                'PASSED': '✅',
                'WARNING': '⚠️',
                'INFO': 'ℹ️',
                'FAILED': '❌'
            }.get(result['status'], '•')
            print(f"  {status_icon} {result['stage']}: {result['message']}")

        overall = '✅' if report['status'] == 'PASSED' else '⚠️'
        print(f"\n🎯 Overall Status: {overall} {report['status']}")
        print("=" * 60)


def validate_before_pipeline(config: RunConfig, verbose: bool = False,
                             resume: Optional[Union[str, Path]] = None) -> bool:
    """
    Convenience function for pre-flight validation

    Returns:
        True if validation passes, False otherwise
    """
    try:
        validator = PipelineValidator(config)
        report = validator.validate_complete_pipeline(resume)
        if verbose:
            validator.print_validation_report(report)
        return True
    except ValidationError as e:
        print(e.get_formatted_error())
        if verbose:
            print("\n💥 Validation failed - pipeline cannot continue")
            print("🔧 Please fix the issues above and try again")
        return False


def main(argv=None) -> int:
    """CLI interface for standalone validation"""
    import argparse

    parser = argparse.ArgumentParser(description='EmambaIR run pre-flight validator')
    parser.add_argument('config', help='YAML run configuration to validate')
    parser.add_argument('--resume', help='Checkpoint a training run would resume from')
    parser.add_argument('-v', '--verbose', action='store_true', help='Show detailed validation report')
    args = parser.parse_args(argv)

    log_level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=log_level, format='%(asctime)s - %(levelname)s - %(message)s')

    try:
        config = load_run_config(args.config)
    except ValidationError as e:
        print(e.get_formatted_error())
        return 1
    return 0 if validate_before_pipeline(config, verbose=True, resume=args.resume) else 1


if __name__ == "__main__":
    sys.exit(main())

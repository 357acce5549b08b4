#!/usr/bin/env python3
"""
Run configuration for the EmambaIR harness

Precedence: dataclass defaults < YAML file < CLI overrides < EMAMBAIR_SEED.
The effective configuration (to_dict) is echoed into reports and checkpoints.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml

from network import ModelConfig
from validation_utils import FileValidator, ValidationError

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "EMAMBAIR_SEED"
MODES = ("simulate", "train", "eval", "ablate-k", "ablate-modules")
TASKS = ("deblur", "lowlight", "derain")
PATTERNS = ("smooth", "step_edge")


def _config_error(message: str, error_code: str, suggestions=None) -> ValidationError:
    return ValidationError(message, error_code=error_code, category=ValidationError.CONFIG_ERROR,
                           suggestions=suggestions, step="config")


@dataclass
class OptimizerConfig:
    lr_initial: float = 2e-4
    lr_min: float = 1e-7
    total_steps: Optional[int] = None  # schedule horizon; defaults to the run's step count


@dataclass
class DataConfig:
    data_dir: Optional[str] = None
    task: str = "deblur"
    pattern: str = "smooth"
    num_pairs: int = 4
    image_size: int = 32
    frames: int = 7
    motion: float = 1.0
    threshold: float = 0.2
    frame_interval_us: int = 1000
    event_noise_rate: float = 0.0
    event_hot_pixel_rate: float = 0.0


@dataclass
class AugmentationConfig:
    flips: bool = True
    voxel_noise_std: float = 0.0
    voxel_hot_pixel_rate: float = 0.0


@dataclass
class RunConfig:
    mode: str = "train"
    seed: int = 0
    steps: int = 200
    crop_size: int = 32
    log_every: int = 20
    checkpoint_every: int = 0
    out_dir: str = "runs/default"
    checkpoint: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    _SECTIONS = {
        "model": ModelConfig,
        "optimizer": OptimizerConfig,
        "data": DataConfig,
        "augmentation": AugmentationConfig,
    }

    @property
    def schedule_steps(self) -> int:
        return self.optimizer.total_steps if self.optimizer.total_steps is not None else self.steps

    def validate(self) -> "RunConfig":
        """Check cross-field invariants; returns self for chaining."""
        if self.mode not in MODES:
            raise _config_error(f"Unknown mode '{self.mode}'", "UNKNOWN_MODE",
                                suggestions=[f"Use one of: {', '.join(MODES)}"])
        if self.data.task not in TASKS:
            raise _config_error(f"Unknown task '{self.data.task}'", "UNKNOWN_TASK",
                                suggestions=[f"Use one of: {', '.join(TASKS)}"])
        if self.data.pattern not in PATTERNS:
            raise _config_error(f"Unknown pattern '{self.data.pattern}'", "UNKNOWN_PATTERN",
                                suggestions=[f"Use one of: {', '.join(PATTERNS)}"])
        self.model.validate()
        divisor = self.model.divisor
        if self.crop_size % divisor:
            raise _config_error(
                f"crop_size {self.crop_size} not divisible by 2^(levels-1) = {divisor}",
                "DIVISIBILITY_VIOLATION",
                suggestions=[f"Use a multiple of {divisor}"]
            )
        if self.crop_size > self.data.image_size:
            raise _config_error(
                f"crop_size {self.crop_size} exceeds image_size {self.data.image_size}",
                "CROP_TOO_LARGE"
            )
        if self.steps < 0:
            raise _config_error(f"steps must be >= 0, got {self.steps}", "INVALID_STEPS")
        if not 0 < self.optimizer.lr_min <= self.optimizer.lr_initial:
            raise _config_error(
                f"Schedule needs 0 < lr_min <= lr_initial, got {self.optimizer.lr_min} / "
                f"{self.optimizer.lr_initial}",
                "SCHEDULE_ORDER"
            )
        if self.data.frames < 2:
            raise _config_error("data.frames must be >= 2", "EMPTY_FRAMES")
        if self.data.num_pairs < 1:
            raise _config_error("data.num_pairs must be >= 1", "INVALID_NUM_PAIRS")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise _config_error("log_every must be >= 1 and checkpoint_every >= 0", "INVALID_INTERVAL")
        return self

    def to_dict(self) -> Dict[str, Any]:
        values = {}
        for f in fields(self):
            value = getattr(self, f.name)
            values[f.name] = asdict(value) if is_dataclass(value) else value
        return values

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise _config_error(f"Unknown config keys: {', '.join(unknown)}", "UNKNOWN_CONFIG_KEY",
                                suggestions=["See INPUT_REQUIREMENTS.md for the documented keys"])
        kwargs = {}
        for name, value in values.items():
            section = cls._SECTIONS.get(name)
            if section is ModelConfig:
                kwargs[name] = ModelConfig.from_dict(value or {})
            elif section is not None:
                section_keys = {f.name for f in fields(section)}
                extra = sorted(set(value or {}) - section_keys)
                if extra:
                    raise _config_error(f"Unknown {name} keys: {', '.join(extra)}", "UNKNOWN_CONFIG_KEY")
                kwargs[name] = section(**(value or {}))
            else:
                kwargs[name] = value
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> "RunConfig":
        path = FileValidator.validate_input_file(path, kind="config")
        try:
            with open(path, encoding="utf-8") as handle:
                values = yaml.safe_load(handle) or {}
        except yaml.YAMLError as e:
            raise _config_error(f"Cannot parse {path}: {e}", "CONFIG_PARSE_ERROR")
        if not isinstance(values, dict):
            raise _config_error(f"{path} must hold a mapping at top level", "CONFIG_PARSE_ERROR")
        logger.debug(f"Loaded config {path}")
        return cls.from_dict(values)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        """
        Apply dotted-key overrides, e.g. {"seed": 3, "model.ks": [2, 2, 2]}

        None values are skipped so unset CLI flags leave file values alone.
        """
        merged = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            target = merged
            *parents, leaf = key.split(".")
            for part in parents:
                if not isinstance(target.get(part), dict):
                    raise _config_error(f"Override '{key}' does not name a config section", "UNKNOWN_CONFIG_KEY")
                target = target[part]
            target[leaf] = value
        return RunConfig.from_dict(merged)

    def with_environment(self, environ: Optional[Mapping[str, str]] = None) -> "RunConfig":
        environ = os.environ if environ is None else environ
        raw = environ.get(SEED_ENV_VAR)
        if raw is None or raw == "":
            return self
        try:
            seed = int(raw)
        except ValueError:
            raise _config_error(f"{SEED_ENV_VAR}='{raw}' is not an integer", "INVALID_SEED")
        logger.info(f"🔧 Seed overridden by {SEED_ENV_VAR}: {seed}")
        return self.with_overrides({"seed": seed})


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None,
                    environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """File (optional) + overrides + environment, validated."""
    config = RunConfig.from_yaml(path) if path else RunConfig()
    if overrides:
        config = config.with_overrides(overrides)
    return config.with_environment(environ).validate()

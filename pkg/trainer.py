#!/usr/bin/env python3
"""
Training, evaluation and ablation drivers
EmambaIR toolkit, harness

LOGIC:
- Samples come from a dataset directory (data.data_dir) or are generated in memory
- Step s draws its crops, flips and voxel perturbations for sample i from the
  seed sequence (seed, s, i), so a resumed run replays the same batches
- forward -> L1 loss -> backward -> Adam with cosine-annealed rate
- Checkpoints every checkpoint_every steps and at the end of the run
"""

import logging
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from checkpoint import Checkpoint
from event_pipeline import AugmentFlags, VoxelGrid, augment, random_crop
from metrics import MetricsReport, psnr
from network import EmambaIR, compute_loss, param_count
from optimizer import OptimizerState, adam_step
from run_config import RunConfig
from synthetic_data import TrainingSample, build_samples, load_samples
from tensor_engine import Tensor, backward, no_grad
from tensor_io import write_tensor
from validation_utils import ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"


class Trainer:
    """
    Runs one configuration end to end

    All randomness derives from config.seed; two Trainers with equal configs
    produce bitwise-identical checkpoints.
    """

    def __init__(self, config: RunConfig, samples: Optional[Sequence[TrainingSample]] = None):
        self.config = config.validate()
        self.out_dir = Path(config.out_dir)
        self._samples: Optional[List[TrainingSample]] = None if samples is None else list(samples)

    @property
    def samples(self) -> List[TrainingSample]:
        if self._samples is None:
            data = self.config.data
            bins = self.config.model.voxel_bins
            if data.data_dir:
                self._samples = load_samples(data.data_dir, bins, limit=data.num_pairs)
            else:
                self._samples = build_samples(data, self.config.seed, bins)
        return self._samples

    def initial_state(self) -> Tuple[EmambaIR, OptimizerState]:
        model = EmambaIR(self.config.model, seed=self.config.seed)
        state = OptimizerState(lr_initial=self.config.optimizer.lr_initial, lr_min=self.config.optimizer.lr_min,
                               total_steps=self.config.schedule_steps)
        return model, state

    def batch(self, step: int) -> Tuple[Tensor, Tensor, Tensor]:
        """(degraded [B,C,h,w], voxel [B,bins,h,w], sharp [B,C,h,w]) for one training step."""
        augmentation = self.config.augmentation
        crop = self.config.crop_size
        degraded, voxels, sharp = [], [], []
        for i, sample in enumerate(self.samples):
            seed = [self.config.seed, step, i]
            rng = np.random.default_rng(seed)
            stacked = Tensor(np.concatenate([sample.degraded.data, sample.sharp.data], axis=0))
            voxel = VoxelGrid(sample.voxel.shape[0], sample.voxel)
            if crop < stacked.shape[-1] or crop < stacked.shape[-2]:
                stacked, voxel = random_crop(stacked, voxel, crop, seed=int(rng.integers(2 ** 32)))
            flags = None if augmentation.flips else AugmentFlags()
            stacked, voxel = augment(stacked, voxel, flags=flags, seed=int(rng.integers(2 ** 32)),
                                     noise_std=augmentation.voxel_noise_std,
                                     hot_pixel_rate=augmentation.voxel_hot_pixel_rate)
            channels = sample.degraded.shape[0]
            degraded.append(stacked.data[:channels])
            sharp.append(stacked.data[channels:])
            voxels.append(voxel.data.data)
        return Tensor(np.stack(degraded)), Tensor(np.stack(voxels)), Tensor(np.stack(sharp))

    def _load_resume(self, path: Union[str, Path], model: EmambaIR) -> Tuple[OptimizerState, int]:
        checkpoint = Checkpoint.load(path)
        if checkpoint.model_config != self.config.model or checkpoint.seed != self.config.seed:
            raise ValidationError(
                f"Checkpoint {path} was trained with a different model config or seed",
                error_code="INCOMPATIBLE_CHECKPOINT",
                category=ValidationError.CONFIG_ERROR,
                suggestions=["Resume with the config file used for the original run"]
            )
        model.load_parameters(checkpoint.params)
        logger.info(f"🔄 Resuming from {path} at step {checkpoint.step}")
        return checkpoint.optimizer, checkpoint.step

    def _checkpoint(self, model: EmambaIR, state: OptimizerState, step: int) -> Checkpoint:
        params = {name: t.detach() for name, t in model.named_parameters().items()}
        return Checkpoint(params=params, model_config=self.config.model, optimizer=state, step=step,
                          seed=self.config.seed, run_config=self.config.to_dict())

    def train(self, resume: Optional[Union[str, Path]] = None,
              stop_step: Optional[int] = None) -> Tuple[Checkpoint, MetricsReport]:
        """
        Train for config.steps steps (or until stop_step)

        Args:
            resume: checkpoint to continue from
            stop_step: stop early after this many total steps; the run can be resumed later

        Returns:
            (final checkpoint, report with loss curve and per-sample metrics)
        """
        model, state = self.initial_state()
        start = 0
        if resume is not None:
            state, start = self._load_resume(resume, model)
        end = self.config.steps if stop_step is None else min(stop_step, self.config.steps)
        report = MetricsReport(config=self.config.to_dict())
        logger.info(f"🚀 Training {model.parameter_count()} parameters, steps {start} -> {end}")

        began = time.perf_counter()
        for step in range(start, end):
            degraded, voxels, sharp = self.batch(step)
            try:
                restored = model(degraded, voxels)
                loss = compute_loss(restored, sharp)
            except ValidationError as e:
                if e.error_code != "NON_FINITE_VALUE":
                    raise
                raise ValidationError(
                    f"Loss became NaN/Inf at step {step}: {e.args[0]}",
                    error_code="NAN_LOSS",
                    severity=ValidationError.CRITICAL,
                    category=ValidationError.NUMERIC_ERROR,
                    suggestions=["Lower optimizer.lr_initial", "Inspect the dataset for invalid values"],
                    step="train"
                )
            backward(loss)
            new_params, state = adam_step(model.named_parameters(), state)
            model.load_parameters(new_params)
            report.loss_curve.append((step, loss.item()))

            if (step + 1) % self.config.log_every == 0 or step == start:
                logger.info(f"📈 step {step + 1}/{self.config.steps}: L1 {loss.item():.5f}, "
                            f"PSNR {psnr(restored.data, sharp):.2f} dB, lr {state.scheduled_lr(step):.2e}")
            if self.config.checkpoint_every and (step + 1) % self.config.checkpoint_every == 0:
                self._checkpoint(model, state, step + 1).save(self.out_dir / f"step_{step + 1:06d}.ckpt")
        report.wall_clock_s = time.perf_counter() - began

        checkpoint = self._checkpoint(model, state, end)
        checkpoint.save(self.out_dir / CHECKPOINT_NAME)
        self._score(model, self.samples, report)
        report.save(self.out_dir / "train_report.txt")
        return checkpoint, report

    def _score(self, model: EmambaIR, samples: Sequence[TrainingSample], report: MetricsReport,
               dump_dir: Optional[Path] = None) -> MetricsReport:
        with no_grad():
            for sample in samples:
                restored = model(sample.degraded, sample.voxel)
                report.add_sample(sample.name, restored, sample.sharp, baseline=sample.degraded)
                if dump_dir is not None:
                    write_tensor(dump_dir / f"{sample.name}_restored.etsr", restored)
        return report

    def evaluate(self, checkpoint: Union[Checkpoint, str, Path],
                 samples: Optional[Sequence[TrainingSample]] = None) -> MetricsReport:
        """Full-resolution PSNR/SSIM against ground truth, with the degraded input as baseline."""
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        samples = self.samples if samples is None else samples
        model = checkpoint.build_model()
        config = checkpoint.model_config
        for sample in samples:
            height, width = sample.degraded.shape[-2:]
            if (sample.degraded.shape[0] != config.image_channels or sample.voxel.shape[0] != config.voxel_bins
                    or height % config.divisor or width % config.divisor):
                raise ValidationError(
                    f"Checkpoint ({config.image_channels} channels, {config.voxel_bins} bins, "
                    f"multiples of {config.divisor}) cannot process {sample.name} {sample.degraded.shape}",
                    error_code="INCOMPATIBLE_CHECKPOINT",
                    category=ValidationError.CONFIG_ERROR,
                    step="eval"
                )
        dump_dir = self.out_dir / "restored"
        dump_dir.mkdir(parents=True, exist_ok=True)
        began = time.perf_counter()
        report = MetricsReport(config=self.config.to_dict())
        self._score(model, samples, report, dump_dir)
        report.wall_clock_s = time.perf_counter() - began
        report.save(self.out_dir / "eval_report.txt")
        return report


MODULE_VARIANTS = {
    "rlfb_only": {"use_tsam": False, "use_gssm": False},
    "gssm_only": {"use_tsam": False, "use_gssm": True},
    "tsam_only": {"use_tsam": True, "use_gssm": False},
    "full": {"use_tsam": True, "use_gssm": True},
}

TIMING_TOLERANCE = 0.2


def _run_variant(config: RunConfig, out_dir: Path, model_overrides: dict, seed: int,
                 samples: dict) -> Tuple[Checkpoint, MetricsReport]:
    """Train one model variant; generated samples are shared per seed."""
    values = config.to_dict()
    values["out_dir"] = str(out_dir)
    values["seed"] = seed
    values["model"].update(model_overrides)
    trainer = Trainer(RunConfig.from_dict(values), samples=samples.get(seed))
    result = trainer.train()
    samples[seed] = trainer.samples
    return result


def _seconds_per_step(report: MetricsReport) -> float:
    return report.wall_clock_s / max(len(report.loss_curve), 1)


def _write_table(table: pd.DataFrame, path: Path) -> None:
    text = table.to_string(index=False, float_format=lambda v: f"{v:.6f}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n", encoding="utf-8")
    logger.info(f"📝 Ablation table:\n{text}")


def ablate_k(config: RunConfig, k_list: Sequence[Optional[int]], include_dense: bool = False,
             seeds: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """
    Train and evaluate one model per k (and per seed) on shared data

    Returns one row per k with columns k, psnr, ssim, seconds_per_step,
    param_count; metrics and timings are averaged over the seeds.
    Raises PARAM_COUNT_DRIFT if the parameter count differs between rows.
    """
    seeds = [config.seed] if seeds is None else list(seeds)
    rows = []
    sweep = list(k_list) + ([None] if include_dense else [])
    base = Path(config.out_dir)
    shared_samples = {}
    all_counts = set()
    for k in sweep:
        label = "dense" if k is None else str(k)
        runs = []
        for seed in seeds:
            out_dir = base / f"k_{label}" if len(seeds) == 1 else base / f"k_{label}" / f"seed_{seed}"
            runs.append(_run_variant(config, out_dir, {"ks": [k] * config.model.levels}, seed, shared_samples))
        counts = {param_count(checkpoint.params) for checkpoint, _ in runs}
        all_counts.update(counts)
        rows.append({
            "k": label,
            "psnr": float(np.mean([report.mean_psnr for _, report in runs])),
            "ssim": float(np.mean([report.mean_ssim for _, report in runs])),
            "seconds_per_step": float(np.mean([_seconds_per_step(report) for _, report in runs])),
            "param_count": max(counts),
        })
        logger.info(f"🔬 k={label}: PSNR {rows[-1]['psnr']:.3f} dB over {len(seeds)} seed(s), "
                    f"{rows[-1]['seconds_per_step'] * 1e3:.1f} ms/step, {max(counts)} parameters")

    table = pd.DataFrame(rows, columns=["k", "psnr", "ssim", "seconds_per_step", "param_count"])
    if len(all_counts) > 1:
        raise ValidationError(
            f"Parameter count changed across the k sweep: {sorted(all_counts)}",
            error_code="PARAM_COUNT_DRIFT",
            severity=ValidationError.CRITICAL,
            category=ValidationError.NUMERIC_ERROR,
            step="ablate-k"
        )
    sparse = table[table["k"] != "dense"]
    if np.all(np.diff(sparse["psnr"].to_numpy()) >= 0):
        logger.info(f"✅ Mean PSNR is non-decreasing in k over {len(seeds)} seed(s)")
    else:
        logger.warning(f"⚠️  Mean PSNR is not monotone in k over {len(seeds)} seed(s)")
    timing = sparse["seconds_per_step"].to_numpy()
    # a drop of up to TIMING_TOLERANCE below the slowest smaller k counts as noise
    if np.all(timing[1:] >= (1.0 - TIMING_TOLERANCE) * np.maximum.accumulate(timing)[:-1]):
        logger.info("✅ Time per step is non-decreasing in k within noise")
    else:
        logger.warning("⚠️  Time per step dropped as k grew: "
                       + ", ".join(f"k={k}: {t * 1e3:.1f} ms" for k, t in zip(sparse["k"], timing)))

    _write_table(table, base / "ablation_k.txt")
    return table


def ablate_modules(config: RunConfig, variants: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Train and evaluate TSAM/GSSM on-off variants with the same seed and data

    variants are keys of MODULE_VARIANTS; rlfb_only is the baseline that
    stacks residual local feature blocks without either module.
    Returns one row per variant: variant, use_tsam, use_gssm, psnr, ssim,
    seconds_per_step, param_count.
    """
    variants = list(MODULE_VARIANTS) if variants is None else list(variants)
    unknown = [name for name in variants if name not in MODULE_VARIANTS]
    if unknown or not variants:
        raise ValidationError(
            f"Unknown module variants: {', '.join(unknown) or '(none given)'}",
            error_code="UNKNOWN_VARIANT",
            category=ValidationError.CONFIG_ERROR,
            suggestions=[f"Use any of: {', '.join(MODULE_VARIANTS)}"],
            step="ablate-modules"
        )
    base = Path(config.out_dir)
    shared_samples = {}
    rows = []
    for name in variants:
        flags = MODULE_VARIANTS[name]
        checkpoint, report = _run_variant(config, base / name, flags, config.seed, shared_samples)
        rows.append({"variant": name, **flags, "psnr": report.mean_psnr, "ssim": report.mean_ssim,
                     "seconds_per_step": _seconds_per_step(report),
                     "param_count": param_count(checkpoint.params)})
        logger.info(f"🔬 {name}: PSNR {report.mean_psnr:.3f} dB, {rows[-1]['param_count']} parameters")

    table = pd.DataFrame(rows, columns=["variant", "use_tsam", "use_gssm", "psnr", "ssim",
                                        "seconds_per_step", "param_count"])
    _write_table(table, base / "ablation_modules.txt")
    return table

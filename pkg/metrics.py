#!/usr/bin/env python3
"""
Image quality metrics and run reports

- psnr: 10*log10(peak^2 / MSE), capped at 100 dB when MSE < 1e-10
- ssim: Gaussian-windowed (11x11, sigma 1.5) SSIM over valid positions,
  stabilizers (0.01*peak)^2 and (0.03*peak)^2, averaged over channels
- MetricsReport: per-sample table, means, loss curve, wall-clock, config echo
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from scipy.signal import convolve2d

from tensor_engine import Tensor
from validation_utils import ErrorHandler, ShapeValidator, ValidationError

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _array(x: Union[Tensor, np.ndarray]) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def psnr(a: Union[Tensor, np.ndarray], b: Union[Tensor, np.ndarray], peak: float = 1.0) -> float:
    a, b = _array(a), _array(b)
    ShapeValidator.check_same_shape(a.shape, b.shape, "psnr", step="metrics")
    if peak <= 0:
        raise ValidationError(f"PSNR peak must be positive, got {peak}", error_code="INVALID_PEAK",
                              category=ValidationError.CONFIG_ERROR, step="metrics")
    mse = float(np.mean((a - b) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    profile = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    window = np.outer(profile, profile)
    return window / window.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, window: np.ndarray, c1: float, c2: float) -> float:
    def filtered(x):
        return convolve2d(x, window, mode="valid")

    mu_a, mu_b = filtered(a), filtered(b)
    var_a = filtered(a * a) - mu_a * mu_a
    var_b = filtered(b * b) - mu_b * mu_b
    covariance = filtered(a * b) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + c1) * (2.0 * covariance + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def ssim(a: Union[Tensor, np.ndarray], b: Union[Tensor, np.ndarray], peak: float = 1.0) -> float:
    """Mean SSIM of [H, W] or [C, H, W] images."""
    a, b = _array(a), _array(b)
    ShapeValidator.check_same_shape(a.shape, b.shape, "ssim", step="metrics")
    ShapeValidator.check_ndim(a.shape, (2, 3), "ssim", step="metrics")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValidationError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[-2]}x{a.shape[-1]}",
            error_code="IMAGE_TOO_SMALL",
            category=ValidationError.SHAPE_ERROR,
            step="metrics"
        )
    window = gaussian_window()
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    planes_a = a.reshape((-1,) + a.shape[-2:])
    planes_b = b.reshape((-1,) + b.shape[-2:])
    return float(np.mean([_ssim_plane(pa, pb, window, c1, c2) for pa, pb in zip(planes_a, planes_b)]))


@dataclass
class MetricsReport:
    """Per-sample PSNR/SSIM rows plus run-level context."""

    samples: List[Dict] = field(default_factory=list)
    loss_curve: List[Tuple[int, float]] = field(default_factory=list)
    wall_clock_s: float = 0.0
    config: Dict = field(default_factory=dict)

    def add_sample(self, name: str, restored, target, baseline=None, peak: float = 1.0) -> Dict:
        row = {"sample": name, "psnr": psnr(restored, target, peak), "ssim": ssim(restored, target, peak)}
        if baseline is not None:
            row["baseline_psnr"] = psnr(baseline, target, peak)
        self.samples.append(row)
        logger.info(f"📊 {name}: PSNR {row['psnr']:.2f} dB, SSIM {row['ssim']:.4f}"
                    + (f" (input {row['baseline_psnr']:.2f} dB)" if baseline is not None else ""))
        return row

    def table(self) -> pd.DataFrame:
        return pd.DataFrame(self.samples)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([row["psnr"] for row in self.samples])) if self.samples else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([row["ssim"] for row in self.samples])) if self.samples else float("nan")

    @property
    def mean_baseline_psnr(self) -> Optional[float]:
        values = [row["baseline_psnr"] for row in self.samples if "baseline_psnr" in row]
        return float(np.mean(values)) if values else None

    def to_text(self) -> str:
        lines = ["EmambaIR metrics report", "=" * 40]
        if self.samples:
            lines.append(self.table().to_string(index=False, float_format=lambda v: f"{v:.4f}"))
            lines.append(f"mean PSNR: {self.mean_psnr:.4f} dB")
            lines.append(f"mean SSIM: {self.mean_ssim:.4f}")
            if self.mean_baseline_psnr is not None:
                lines.append(f"mean input PSNR: {self.mean_baseline_psnr:.4f} dB")
        if self.loss_curve:
            first_step, first_loss = self.loss_curve[0]
            last_step, last_loss = self.loss_curve[-1]
            lines.append(f"loss: step {first_step} L1 {first_loss:.6f} -> step {last_step} L1 {last_loss:.6f} "
                         f"({len(self.loss_curve)} steps)")
        lines.append(f"wall-clock: {self.wall_clock_s:.2f} s")
        if self.config:
            lines.append("config:")
            lines.append(yaml.safe_dump(self.config, sort_keys=True).rstrip())
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_text(), encoding="utf-8")
            if self.loss_curve:
                curve = pd.DataFrame(self.loss_curve, columns=["step", "l1"])
                curve.to_csv(path.with_name(path.stem + "_loss.csv"), index=False, lineterminator="\n")
        except OSError as e:
            raise ValidationError(ErrorHandler.handle_file_error(e, path, "writing report"),
                                  error_code="REPORT_WRITE_FAILED", category=ValidationError.FILE_ERROR)
        logger.info(f"📝 Report written to {path}")
        return path


def evaluate_pairs(names: Sequence[str], restored: Sequence, targets: Sequence,
                   baselines: Optional[Sequence] = None, peak: float = 1.0) -> MetricsReport:
    report = MetricsReport()
    for i, name in enumerate(names):
        report.add_sample(name, restored[i], targets[i], None if baselines is None else baselines[i], peak)
    return report

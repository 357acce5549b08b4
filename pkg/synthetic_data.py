#!/usr/bin/env python3
"""
Synthetic training pairs and dataset directories

TASKS:
- deblur: a pattern translates across F frames; sharp = middle frame,
  blurry = temporal mean of all frames
- lowlight: the degraded input is an under-exposed, clipped, noisy copy of
  the sharp middle frame
- derain: bright streaks fall across every frame; sharp = clean middle frame,
  degraded = rainy middle frame

Events are simulated from the full-range frame sequence, including the rain
streaks for derain.

DATASET DIRECTORY (written by the 'simulate' mode):
  pair_XXX_blurry.etsr, pair_XXX_sharp.etsr, pair_XXX_events.csv, dataset.yaml
"""

import logging
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Union

import numpy as np
import yaml

from event_pipeline import EventStream, inject_noise, read_events, simulate_events, voxelize, write_events
from tensor_engine import Tensor
from tensor_io import read_tensor, write_tensor
from validation_utils import FileValidator, ValidationError

logger = logging.getLogger(__name__)

LOWLIGHT_EXPOSURE = 0.25
LOWLIGHT_NOISE_STD = 0.01
_WAVES = 4
RAIN_DENSITY = 0.012
RAIN_SPEED = 3.0
RAIN_LENGTH_FRACTION = 0.2
RAIN_MAX_SLANT = 0.3
RAIN_INTENSITY = 0.5


class SyntheticPair(NamedTuple):
    blurry: Tensor
    sharp: Tensor
    stream: EventStream


class TrainingSample(NamedTuple):
    name: str
    degraded: Tensor   # [C, H, W]
    sharp: Tensor      # [C, H, W]
    voxel: Tensor      # [bins, H, W]


def _smooth_frames(rng: np.random.Generator, size: int, motion: float, frames: int) -> List[np.ndarray]:
    """Sum of random plane waves in [0.1, 0.9], translated by `motion` px per frame."""
    freqs = rng.uniform(0.5, 3.0, size=(_WAVES, 2)) * rng.choice(np.array([-1.0, 1.0]), size=(_WAVES, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=_WAVES)
    amplitudes = rng.uniform(0.5, 1.0, size=_WAVES)
    amplitudes *= 0.4 / amplitudes.sum()
    angle = rng.uniform(0.0, 2.0 * np.pi)
    step = motion * np.array([np.cos(angle), np.sin(angle)])
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    rendered = []
    for f in range(frames):
        dx, dy = step * (f - (frames - 1) / 2.0)
        phase = (freqs[:, 0, None, None] * (xs - dx) + freqs[:, 1, None, None] * (ys - dy)) * 2.0 * np.pi / size
        rendered.append(0.5 + (amplitudes[:, None, None] * np.sin(phase + phases[:, None, None])).sum(axis=0))
    return rendered


def step_edge_frames(size: int, motion: float, frames: int, low: float = 0.2,
                     high: float = 0.8) -> List[np.ndarray]:
    """A vertical edge moving right by `motion` px per frame, centred on the middle frame."""
    xs = np.arange(size, dtype=np.float64)[None, :].repeat(size, axis=0)
    rendered = []
    for f in range(frames):
        edge = size / 2.0 + motion * (f - (frames - 1) / 2.0)
        rendered.append(np.where(xs >= edge, high, low))
    return rendered


def rain_layers(rng: np.random.Generator, size: int, frames: int, density: float = RAIN_DENSITY,
                speed: float = RAIN_SPEED) -> List[np.ndarray]:
    """
    Binary rain-streak masks, one per frame

    Streaks share one slant, fall `speed` px per frame and wrap around the
    image borders.
    """
    count = max(1, int(round(density * size * size)))
    heads = rng.uniform(0.0, size, size=(count, 2))
    slant = rng.uniform(-RAIN_MAX_SLANT, RAIN_MAX_SLANT)
    direction = np.array([slant, 1.0]) / np.hypot(slant, 1.0)
    length = max(2.0, RAIN_LENGTH_FRACTION * size)
    along = np.linspace(0.0, length, 2 * int(np.ceil(length)))
    masks = []
    for f in range(frames):
        points = (heads + direction * speed * f)[:, None, :] - along[None, :, None] * direction
        xs = np.floor(points[..., 0]).astype(np.int64) % size
        ys = np.floor(points[..., 1]).astype(np.int64) % size
        mask = np.zeros((size, size))
        mask[ys, xs] = 1.0
        masks.append(mask)
    return masks


def add_rain(frame: np.ndarray, mask: np.ndarray, intensity: float = RAIN_INTENSITY) -> np.ndarray:
    """Screen-blend bright streaks over a frame; stays inside [0, 1]."""
    return frame + (1.0 - frame) * intensity * mask


def make_synthetic_pair(seed: int, motion: float, frames: int, threshold: float, size: int = 32,
                        pattern: str = "smooth", task: str = "deblur",
                        frame_interval_us: int = 1000) -> SyntheticPair:
    """
    Render one degraded/sharp pair and its event stream

    Args:
        seed: pattern seed
        motion: pixels per frame
        frames: F >= 2
        threshold: contrast threshold for the event simulation

    Returns:
        SyntheticPair(blurry [1,H,W], sharp [1,H,W], stream)
    """
    if frames < 2:
        raise ValidationError(f"make_synthetic_pair needs >= 2 frames, got {frames}",
                              error_code="EMPTY_FRAMES", category=ValidationError.CONFIG_ERROR)
    rng = np.random.default_rng(seed)
    if pattern == "step_edge":
        sequence = step_edge_frames(size, motion, frames)
    else:
        sequence = _smooth_frames(rng, size, motion, frames)
    sharp = sequence[frames // 2]
    if task == "lowlight":
        degraded = np.clip(sharp * LOWLIGHT_EXPOSURE + rng.normal(0.0, LOWLIGHT_NOISE_STD, sharp.shape), 0.0, 1.0)
    elif task == "derain":
        sequence = [add_rain(frame, mask) for frame, mask in zip(sequence, rain_layers(rng, size, frames))]
        degraded = sequence[frames // 2]
    else:
        degraded = np.mean(sequence, axis=0)
    timestamps = [f * frame_interval_us for f in range(frames)]
    stream = simulate_events(sequence, timestamps, threshold)
    return SyntheticPair(Tensor(degraded[None]), Tensor(sharp[None]), stream)


def _render_pair(data_config, seed: int, index: int):
    """Pair `index` of a dataset: seeded by the sequence (seed, index)."""
    pair_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    pair = make_synthetic_pair(
        seed=pair_seed, motion=data_config.motion, frames=data_config.frames,
        threshold=data_config.threshold, size=data_config.image_size, pattern=data_config.pattern,
        task=data_config.task, frame_interval_us=data_config.frame_interval_us,
    )
    stream = inject_noise(pair.stream, data_config.event_noise_rate, data_config.event_hot_pixel_rate,
                          seed=[seed, index])
    return f"pair_{index:03d}", pair_seed, pair, stream


def build_samples(data_config, seed: int, bins: int) -> List[TrainingSample]:
    """Generate num_pairs pairs in memory, the same pairs write_dataset stores."""
    samples = []
    for i in range(data_config.num_pairs):
        name, _, pair, stream = _render_pair(data_config, seed, i)
        samples.append(TrainingSample(name, pair.blurry, pair.sharp, voxelize(stream, bins).data))
    logger.info(f"📊 Generated {len(samples)} synthetic {data_config.task} pairs "
                f"({data_config.image_size}x{data_config.image_size})")
    return samples


def write_dataset(data_config, seed: int, out_dir: Union[str, Path]) -> Path:
    """Write the dataset directory described in the module docstring."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(data_config.num_pairs):
        name, pair_seed, pair, stream = _render_pair(data_config, seed, i)
        write_tensor(out_dir / f"{name}_blurry.etsr", pair.blurry)
        write_tensor(out_dir / f"{name}_sharp.etsr", pair.sharp)
        write_events(stream, out_dir / f"{name}_events.csv")
        entries.append({"name": name, "seed": pair_seed, "events": len(stream)})
        logger.debug(f"Wrote {name}: {len(stream)} events")

    manifest = {
        "seed": int(seed),
        "task": data_config.task,
        "pattern": data_config.pattern,
        "width": int(data_config.image_size),
        "height": int(data_config.image_size),
        "frames": int(data_config.frames),
        "frame_interval_us": int(data_config.frame_interval_us),
        "threshold": float(data_config.threshold),
        "motion": float(data_config.motion),
        "pairs": entries,
    }
    with open(out_dir / "dataset.yaml", "w", encoding="utf-8") as handle:
        yaml.safe_dump(manifest, handle, sort_keys=True)
    logger.info(f"✅ Wrote {len(entries)} pairs to {out_dir}")
    return out_dir


def read_manifest(data_dir: Union[str, Path]) -> Dict:
    manifest_path = Path(data_dir) / "dataset.yaml"
    FileValidator.validate_input_file(manifest_path, kind="config")
    with open(manifest_path, encoding="utf-8") as handle:
        manifest = yaml.safe_load(handle) or {}
    if not manifest.get("pairs"):
        raise ValidationError(
            f"{manifest_path} lists no pairs",
            error_code="EMPTY_DATASET",
            category=ValidationError.DATA_ERROR,
            suggestions=["Run the 'simulate' mode to create a dataset"]
        )
    return manifest


def load_samples(data_dir: Union[str, Path], bins: int, limit: Optional[int] = None) -> List[TrainingSample]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    samples = []
    for entry in manifest["pairs"][:limit]:
        name = entry["name"]
        degraded = read_tensor(data_dir / f"{name}_blurry.etsr")
        sharp = read_tensor(data_dir / f"{name}_sharp.etsr")
        stream = read_events(data_dir / f"{name}_events.csv")
        if degraded.shape != sharp.shape or degraded.shape[-2:] != (stream.height, stream.width):
            raise ValidationError(
                f"{name}: image {degraded.shape} / sharp {sharp.shape} / events "
                f"{stream.height}x{stream.width} disagree",
                error_code="RESOLUTION_MISMATCH",
                category=ValidationError.DATA_ERROR
            )
        samples.append(TrainingSample(name, degraded, sharp, voxelize(stream, bins).data))
    logger.info(f"📂 Loaded {len(samples)} pairs from {data_dir}")
    return samples

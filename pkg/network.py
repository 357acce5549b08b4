#!/usr/bin/env python3
"""
EmambaIR restoration network
UNet-shaped encoder-decoder fusing a degraded image with its event voxel grid

LOGIC:
- Image and voxel grid each enter a 3x3 stem conv
- Encoder level i: [TSAM(image, event) -> GSSM -> RLFB] x repeats, then both
  paths are downsampled by stride-2 3x3 convs
- use_tsam=False drops TSAM together with the whole event branch; use_gssm=False
  drops GSSM. With both off the encoder stacks RLFBs only
- Decoder (image path only): nearest upsample + 3x3 conv, concat the encoder
  skip, 1x1 fuse, RLFB
- A zero-initialized 3x3 output conv plus a global residual from the
  degraded input yields the restored image
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from event_pipeline import DEFAULT_BINS, VoxelGrid
from gssm import GatedStateSpace, GssmConfig
from layers import Conv2d, Module
from tensor_engine import Tensor, absolute, concat, mean, relu, reshape, sub, upsample_nearest
from tsam import TopKSparseAttention, TsamConfig
from validation_utils import ShapeValidator, ValidationError

logger = logging.getLogger(__name__)


def _config_error(message: str, error_code: str, suggestions: List[str] = None) -> ValidationError:
    return ValidationError(message, error_code=error_code, category=ValidationError.CONFIG_ERROR,
                           suggestions=suggestions, step="network")


@dataclass
class ModelConfig:
    """Architecture record; echoed into checkpoints."""

    levels: int = 3
    widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    ks: List[Optional[int]] = field(default_factory=lambda: [4, 4, 4])
    heads: List[int] = field(default_factory=lambda: [2, 2, 2])
    state_size: int = 8
    voxel_bins: int = DEFAULT_BINS
    rlfb_depth: int = 3
    image_channels: int = 1
    repeats: int = 1
    kernel_sizes: List[int] = field(default_factory=lambda: [3, 5, 7])
    tsam_residual: bool = True
    gssm_residual: bool = True
    use_tsam: bool = True
    use_gssm: bool = True

    def __post_init__(self):
        self.widths = list(self.widths)
        self.ks = list(self.ks)
        self.heads = list(self.heads)
        self.kernel_sizes = list(self.kernel_sizes)
        self.validate()

    def validate(self) -> None:
        ShapeValidator.check_positive_int(self.levels, "levels", "INVALID_LEVELS")
        for name in ("widths", "ks", "heads"):
            if len(getattr(self, name)) != self.levels:
                raise _config_error(
                    f"'{name}' needs one entry per level ({self.levels}), got {getattr(self, name)}",
                    "LEVEL_COUNT_MISMATCH"
                )
        for lower, upper in zip(self.widths, self.widths[1:]):
            if upper != 2 * lower:
                raise _config_error(
                    f"Widths must double at every level, got {self.widths}",
                    "WIDTH_RATIO_VIOLATION",
                    suggestions=["Use e.g. widths [16, 32, 64]"]
                )
        for width, heads, k in zip(self.widths, self.heads, self.ks):
            TsamConfig(width, heads, k)
        GssmConfig(self.widths[0], self.state_size, tuple(self.kernel_sizes))
        for name in ("voxel_bins", "rlfb_depth", "image_channels", "repeats"):
            ShapeValidator.check_positive_int(getattr(self, name), name, "INVALID_CONFIG_VALUE")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def check_resolution(self, height: int, width: int) -> None:
        if height % self.divisor or width % self.divisor:
            raise ValidationError(
                f"Input {height}x{width} not divisible by 2^(levels-1) = {self.divisor}",
                error_code="DIVISIBILITY_VIOLATION",
                category=ValidationError.SHAPE_ERROR,
                suggestions=[f"Crop or pad the input to a multiple of {self.divisor}"],
                step="network"
            )

    def with_k(self, k: Optional[int]) -> "ModelConfig":
        return replace(self, ks=[k] * self.levels)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(values) - known)
        if unknown:
            raise _config_error(f"Unknown model keys: {', '.join(unknown)}", "UNKNOWN_CONFIG_KEY")
        return cls(**dict(values))


class ResidualLocalFeatureBlock(Module):
    """RLFB: depth x (3x3 conv -> ReLU) with a residual from block input to output."""

    def __init__(self, channels: int, rng: np.random.Generator, depth: int = 3):
        self.convs = [Conv2d(channels, channels, 3, rng) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for conv in self.convs:
            y = relu(conv(y))
        return x + y


def rlfb_forward(x: Tensor, block: ResidualLocalFeatureBlock) -> Tensor:
    if x.ndim == 3:
        return reshape(block(reshape(x, (1,) + x.shape)), x.shape)
    return block(x)


class EncoderStage(Module):
    def __init__(self, config: ModelConfig, level: int, rng: np.random.Generator):
        width = config.widths[level]
        tsam_config = TsamConfig(width, config.heads[level], config.ks[level], config.tsam_residual)
        gssm_config = GssmConfig(width, config.state_size, tuple(config.kernel_sizes),
                                 residual=config.gssm_residual)
        self.tsam = [TopKSparseAttention(tsam_config, rng) for _ in range(config.repeats)] if config.use_tsam else []
        self.gssm = [GatedStateSpace(gssm_config, rng) for _ in range(config.repeats)] if config.use_gssm else []
        self.rlfb = [ResidualLocalFeatureBlock(width, rng, config.rlfb_depth) for _ in range(config.repeats)]

    def __call__(self, image: Tensor, event: Optional[Tensor]) -> Tensor:
        for repeat, rlfb in enumerate(self.rlfb):
            if self.tsam:
                image = self.tsam[repeat](image, event)
            if self.gssm:
                image = self.gssm[repeat](image)
            image = rlfb(image)
        return image


class DecoderStage(Module):
    def __init__(self, width: int, rng: np.random.Generator, rlfb_depth: int):
        self.up = Conv2d(2 * width, width, 3, rng)
        self.fuse = Conv2d(2 * width, width, 1, rng)
        self.rlfb = ResidualLocalFeatureBlock(width, rng, rlfb_depth)

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.up(upsample_nearest(x, 2))
        return self.rlfb(self.fuse(concat([up, skip], axis=1)))


class EmambaIR(Module):
    """Event-guided restoration UNet. Parameters are drawn from a seeded generator."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        widths = config.widths
        self.image_stem = Conv2d(config.image_channels, widths[0], 3, rng)
        # the event branch only feeds TSAM
        self.event_stem = Conv2d(config.voxel_bins, widths[0], 3, rng) if config.use_tsam else None
        self.encoder = [EncoderStage(config, level, rng) for level in range(config.levels)]
        self.image_down = [Conv2d(widths[i], widths[i + 1], 3, rng, stride=2, padding=1)
                           for i in range(config.levels - 1)]
        self.event_down = [Conv2d(widths[i], widths[i + 1], 3, rng, stride=2, padding=1)
                           for i in range(config.levels - 1)] if config.use_tsam else []
        self.decoder = [DecoderStage(widths[i], rng, config.rlfb_depth)
                        for i in reversed(range(config.levels - 1))]
        self.output = Conv2d(widths[0], config.image_channels, 3, rng, zero_init=True)

    def _inputs(self, image: Tensor, voxel: Union[VoxelGrid, Tensor]) -> Tuple[Tensor, Tensor, bool]:
        events = voxel.data if isinstance(voxel, VoxelGrid) else voxel
        ShapeValidator.check_ndim(image.shape, (3, 4), "restoration input image")
        single = image.ndim == 3
        if single:
            image = reshape(image, (1,) + image.shape)
        if events.ndim == 3:
            events = reshape(events, (1,) + events.shape)
        if image.shape[1] != self.config.image_channels or events.shape[1] != self.config.voxel_bins:
            raise ValidationError(
                f"Expected {self.config.image_channels} image channels and {self.config.voxel_bins} "
                f"voxel bins, got {image.shape[1]} and {events.shape[1]}",
                error_code="SHAPE_MISMATCH",
                category=ValidationError.SHAPE_ERROR,
                step="network"
            )
        if image.shape[0] != events.shape[0] or image.shape[2:] != events.shape[2:]:
            raise ValidationError(
                f"Image {image.shape} and voxel grid {events.shape} do not align",
                error_code="RESOLUTION_MISMATCH",
                category=ValidationError.DATA_ERROR,
                step="network"
            )
        self.config.check_resolution(*image.shape[2:])
        return image, events, single

    def __call__(self, image: Tensor, voxel: Union[VoxelGrid, Tensor]) -> Tensor:
        degraded, events, single = self._inputs(image, voxel)
        x = self.image_stem(degraded)
        e = self.event_stem(events) if self.event_stem is not None else None
        skips = []
        for level, stage in enumerate(self.encoder):
            x = stage(x, e)
            skips.append(x)
            if level < self.config.levels - 1:
                x = self.image_down[level](x)
                if e is not None:
                    e = self.event_down[level](e)
        for stage, skip in zip(self.decoder, reversed(skips[:-1])):
            x = stage(x, skip)
        restored = degraded + self.output(x)
        return reshape(restored, restored.shape[1:]) if single else restored


def unet_forward(image: Tensor, voxel: Union[VoxelGrid, Tensor], model: EmambaIR) -> Tensor:
    return model(image, voxel)


def compute_loss(restored: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error."""
    ShapeValidator.check_same_shape(restored.shape, gt.shape, "compute_loss", step="network")
    return mean(absolute(sub(restored, gt)))


def param_count(params: Mapping[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))

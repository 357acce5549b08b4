#!/usr/bin/env python3
"""
Top-k Sparse Attention Module (TSAM)
EmambaIR toolkit, cross-modal fusion

LOGIC:
- Queries come from the image features, keys and values from the event
  features; each branch is a 1x1 pointwise conv followed by a 3x3 depth-wise conv
- Q and K are L2-normalized per head, so scores are cosine similarities
  scaled by a learnable per-head temperature (initialized to 1/sqrt(d))
- Every query keeps only its k highest scores; the softmax runs over the
  retained entries and the value rows are gathered for those k keys only
- Heads are concatenated, projected by a 1x1 conv and added to the image features
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from layers import Conv2d, Module
from tensor_engine import (Tensor, gather_rows, l2_normalize, matmul, mul, reshape, softmax_axis,
                           split, sum_, take_along_last, topk_indices, topk_retention_mask, transpose)
from validation_utils import ShapeValidator, ValidationError

logger = logging.getLogger(__name__)

Temperature = Union[Tensor, float]


@dataclass(frozen=True)
class TsamConfig:
    """channels C, heads h, retained entries k per query (None = dense)"""

    channels: int
    heads: int = 2
    k: Optional[int] = 4
    residual: bool = True

    def __post_init__(self):
        ShapeValidator.check_positive_int(self.channels, "TSAM channels", "INVALID_CHANNELS")
        ShapeValidator.check_positive_int(self.heads, "TSAM heads", "INVALID_HEADS")
        if self.channels % self.heads:
            raise ValidationError(
                f"TSAM channels ({self.channels}) not divisible by heads ({self.heads})",
                error_code="HEADS_NOT_DIVISIBLE",
                category=ValidationError.CONFIG_ERROR,
                suggestions=["Pick a head count that divides every level width"]
            )
        if self.k is not None:
            ShapeValidator.check_positive_int(self.k, "TSAM k", "INVALID_K")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def _scores(q: Tensor, k: Tensor, temperature: Temperature) -> Tensor:
    ShapeValidator.check_same_shape(q.shape, k.shape, "attention queries/keys")
    swap = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, swap))
    if isinstance(temperature, Tensor):
        return mul(scores, reshape(temperature, temperature.shape + (1, 1)))
    return mul(scores, float(temperature))


def masked_dense_attention(q: Tensor, k: Tensor, v: Tensor, top_k: Optional[int],
                           temperature: Temperature) -> Tensor:
    """Reference path: full score matrix, top-k mask per row, restricted softmax, dense matmul."""
    scores = _scores(q, k, temperature)
    if top_k is None:
        keep = np.ones(scores.shape, dtype=bool)
    else:
        keep = topk_retention_mask(scores.data, top_k, axis=-1)
    return matmul(softmax_axis(scores, axis=-1, mask=keep), v)


def sparse_attention(q: Tensor, k: Tensor, v: Tensor, top_k: Optional[int],
                     temperature: Temperature) -> Tensor:
    """
    Per-query top-k attention over token sequences

    Args:
        q, k, v: [..., h, L, d] head-split token sequences
        top_k: retained keys per query, clamped to L; None attends densely
        temperature: per-head Tensor [h] or a scalar

    Returns:
        [..., h, L, d]
    """
    if top_k is None:
        return masked_dense_attention(q, k, v, None, temperature)
    scores = _scores(q, k, temperature)
    index = topk_indices(scores.data, top_k)
    retained = take_along_last(scores, index)
    weights = softmax_axis(retained, axis=-1, mask=np.ones(retained.shape, dtype=bool))
    values = gather_rows(v, index)
    return sum_(mul(reshape(weights, weights.shape + (1,)), values), axis=-2)


def to_tokens(x: Tensor, heads: int) -> Tensor:
    """[B, C, H, W] -> [B, h, HW, C/h]; head j owns channels [j*d, (j+1)*d)."""
    batch, channels, height, width = x.shape
    split_heads = reshape(x, (batch, heads, channels // heads, height * width))
    return transpose(split_heads, (0, 1, 3, 2))


def from_tokens(tokens: Tensor, height: int, width: int) -> Tensor:
    batch, heads, _, depth = tokens.shape
    return reshape(transpose(tokens, (0, 1, 3, 2)), (batch, heads * depth, height, width))


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    ShapeValidator.check_ndim(x.shape, (3, 4), "TSAM input")
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    return x, False


class TopKSparseAttention(Module):
    """Cross-modal top-k sparse attention block with its own parameters."""

    def __init__(self, config: TsamConfig, rng: np.random.Generator):
        channels = config.channels
        self.config = config
        self.query_pointwise = Conv2d(channels, channels, 1, rng)
        self.query_depthwise = Conv2d(channels, channels, 3, rng, groups=channels)
        self.key_value_pointwise = Conv2d(channels, 2 * channels, 1, rng)
        self.key_value_depthwise = Conv2d(2 * channels, 2 * channels, 3, rng, groups=2 * channels)
        self.temperature = Tensor(np.full(config.heads, 1.0 / np.sqrt(config.head_dim)), requires_grad=True)
        self.output_projection = Conv2d(channels, channels, 1, rng)

    def _project(self, image: Tensor, event: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        if image.shape != event.shape or image.shape[1] != self.config.channels:
            raise ValidationError(
                f"TSAM expects image and event features of {self.config.channels} channels "
                f"at one resolution, got {image.shape} and {event.shape}",
                error_code="SHAPE_MISMATCH",
                category=ValidationError.SHAPE_ERROR,
                step="tsam"
            )
        heads = self.config.heads
        query = self.query_depthwise(self.query_pointwise(image))
        key, value = split(self.key_value_depthwise(self.key_value_pointwise(event)), 2, axis=1)
        q = l2_normalize(to_tokens(query, heads), axis=-1)
        k = l2_normalize(to_tokens(key, heads), axis=-1)
        return q, k, to_tokens(value, heads)

    def project_qkv(self, image_feat: Tensor, event_feat: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Q_I, K_E, V_E as [h, HW, C/h] (or [B, h, HW, C/h] for batched input)."""
        image, single = _batched(image_feat)
        event, _ = _batched(event_feat)
        q, k, v = self._project(image, event)
        if single:
            return tuple(reshape(t, t.shape[1:]) for t in (q, k, v))
        return q, k, v

    def __call__(self, image_feat: Tensor, event_feat: Tensor) -> Tensor:
        image, single = _batched(image_feat)
        event, _ = _batched(event_feat)
        q, k, v = self._project(image, event)
        attended = sparse_attention(q, k, v, self.config.k, self.temperature)
        out = self.output_projection(from_tokens(attended, image.shape[2], image.shape[3]))
        if self.config.residual:
            out = out + image
        return reshape(out, out.shape[1:]) if single else out


def tsam_forward(image_feat: Tensor, event_feat: Tensor, module: TopKSparseAttention) -> Tensor:
    return module(image_feat, event_feat)

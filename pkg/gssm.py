#!/usr/bin/env python3
"""
Gated State-Space Module (GSSM)
EmambaIR toolkit, long-range feature extraction

LOGIC:
1. multiscale_enhance: depth-wise 3/5/7 convs summed, pointwise fuse, residual
2. pointwise 1x1 conv, then LayerNorm over channels at every spatial site
3. cross_scan_2d: the selective scan run along four flattenings of the map
   (row-major forward/backward, column-major forward/backward), averaged
4. nonlinear gated unit: f(X) * mean_HW(GELU(g(X))), projected back to C
5. module-level residual from input to output

SCAN: diagonal A < 0 (A = -exp(A_log)), softplus step size, zero-order hold.
The recurrence is one fused tape primitive with an analytic reverse sweep.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from layers import Conv2d, LayerNorm, Linear, Module
from tensor_engine import (Tensor, concat, exp, flip, gelu, global_avg_pool, make_node, neg, reshape,
                           softplus, split, transpose)
from validation_utils import ShapeValidator, ValidationError

logger = logging.getLogger(__name__)

SERIES_THRESHOLD = 1e-6
DT_MIN = 1e-3
DT_MAX = 1e-1


@dataclass(frozen=True)
class GssmConfig:
    channels: int
    state_size: int = 8
    kernel_sizes: Tuple[int, ...] = (3, 5, 7)
    nonlinear: bool = True
    normalize: bool = True
    residual: bool = True

    def __post_init__(self):
        ShapeValidator.check_positive_int(self.channels, "GSSM channels", "INVALID_CHANNELS")
        ShapeValidator.check_positive_int(self.state_size, "SSM state size", "INVALID_STATE_SIZE")
        even = [k for k in self.kernel_sizes if k % 2 == 0 or k < 1]
        if even:
            raise ValidationError(
                f"Multi-scale kernel sizes must be odd, got {list(self.kernel_sizes)}",
                error_code="EVEN_KERNEL_SIZE",
                category=ValidationError.CONFIG_ERROR,
                suggestions=["Use odd sizes such as 3, 5, 7 so the kernels stay centered"]
            )


# Discretization

def discretize(a, delta, b=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Zero-order hold: A_bar = exp(delta*A), B_bar = (A_bar - 1)/A * B

    Arrays broadcast against each other. Below |A*delta| < 1e-6 the factor
    (A_bar - 1)/A switches to its series delta*(1 + A*delta/2 + (A*delta)^2/6).
    With b omitted the factor itself is returned in place of B_bar.
    """
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(a >= 0):
        raise ValidationError(
            "State matrix entries A must be strictly negative",
            error_code="NON_NEGATIVE_A",
            category=ValidationError.NUMERIC_ERROR,
            suggestions=["Parameterize A as -exp(A_log)"]
        )
    if np.any(delta <= 0):
        raise ValidationError(
            "Step sizes delta must be positive",
            error_code="NON_POSITIVE_STEP",
            category=ValidationError.NUMERIC_ERROR
        )
    product = a * delta
    a_bar = np.exp(product)
    small = np.abs(product) < SERIES_THRESHOLD
    safe_a = np.where(small, -1.0, a)
    factor = np.where(small, delta * (1.0 + product / 2.0 + product * product / 6.0),
                      np.expm1(product) / safe_a)
    return a_bar, factor if b is None else factor * b


def _factor_grad_a(a: np.ndarray, delta: np.ndarray, a_bar: np.ndarray) -> np.ndarray:
    """d/dA of (exp(A*delta) - 1)/A."""
    product = a * delta
    small = np.abs(product) < SERIES_THRESHOLD
    safe_a = np.where(small, -1.0, a)
    exact = delta * a_bar / safe_a - np.expm1(product) / (safe_a * safe_a)
    series = delta * delta / 2.0 + a * delta ** 3 / 3.0
    return np.where(small, series, exact)


# Selective scan

def _scan_batched(x: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    batch, length, channels = x.shape
    state = a.shape[1]
    ShapeValidator.check_same_shape(delta.shape, x.shape, "selective_scan delta")
    ShapeValidator.check_same_shape(a.shape, (channels, state), "selective_scan A")
    ShapeValidator.check_same_shape(b.shape, (batch, length, state), "selective_scan B")
    ShapeValidator.check_same_shape(c.shape, (batch, length, state), "selective_scan C")
    ShapeValidator.check_same_shape(d.shape, (channels,), "selective_scan D")

    xs, steps, a_diag = x.data, delta.data[..., None], a.data
    a_bar, factor = discretize(a_diag, steps)
    b_tok = b.data[:, :, None, :]
    drive = factor * b_tok * xs[..., None]

    hidden = np.zeros((batch, channels, state))
    states = np.empty((batch, length, channels, state))
    for t in range(length):
        hidden = a_bar[:, t] * hidden + drive[:, t]
        states[:, t] = hidden
    y = np.einsum("blcn,bln->blc", states, c.data) + d.data * xs

    def backward_fn(g):
        g_c = np.einsum("blc,blcn->bln", g, states)
        g_d = (g * xs).sum(axis=(0, 1))
        from_output = g[..., None] * c.data[:, :, None, :]
        g_states = np.empty_like(states)
        carry = np.zeros((batch, channels, state))
        for t in range(length - 1, -1, -1):
            g_states[:, t] = from_output[:, t] + carry
            carry = a_bar[:, t] * g_states[:, t]
        previous = np.concatenate([np.zeros((batch, 1, channels, state)), states[:, :-1]], axis=1)
        g_a_bar = g_states * previous
        g_factor = g_states * b_tok * xs[..., None]
        g_x = (g_states * factor * b_tok).sum(axis=-1) + g * d.data
        g_b = (g_states * factor * xs[..., None]).sum(axis=2)
        g_delta = (g_a_bar * a_diag * a_bar + g_factor * a_bar).sum(axis=-1)
        g_a = (g_a_bar * steps * a_bar + g_factor * _factor_grad_a(a_diag, steps, a_bar)).sum(axis=(0, 1))
        return g_x, g_delta, g_a, g_b, g_c, g_d

    return make_node(y, (x, delta, a, b, c, d), backward_fn, "selective_scan")


def selective_scan(x: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """
    Discretized selective SSM along the token axis, h_0 = 0

        h_t = A_bar_t * h_{t-1} + B_bar_t x_t
        y_t = C_t . h_t + D x_t

    Args:
        x: [L, C] or [batch, L, C] token sequence
        delta: per-token step sizes, same shape as x
        a: [C, N] strictly negative diagonal entries
        b, c: per-token [L, N] / [batch, L, N] projections
        d: [C] skip coefficients

    Returns:
        y with the shape of x
    """
    ShapeValidator.check_ndim(x.shape, (2, 3), "selective_scan input")
    if x.shape[-2] < 1:
        raise ValidationError("selective_scan needs L >= 1", error_code="EMPTY_SEQUENCE",
                              category=ValidationError.SHAPE_ERROR)
    if x.ndim == 3:
        return _scan_batched(x, delta, a, b, c, d)
    lift = [reshape(t, (1,) + t.shape) for t in (x, delta, b, c)]
    y = _scan_batched(lift[0], lift[1], a, lift[2], lift[3], d)
    return reshape(y, x.shape)


class SsmParams(Module):
    """
    Selective-scan parameters for C channels with state size N

    A = -exp(A_log) with A_log = log(n + 1); B, C and the step size are
    token-dependent linear maps; D starts at one.
    """

    def __init__(self, channels: int, state_size: int, rng: np.random.Generator):
        self.a_log = Tensor(np.log(np.tile(np.arange(1, state_size + 1, dtype=np.float64), (channels, 1))),
                            requires_grad=True)
        self.b_projection = Linear(channels, state_size, rng, bias=False)
        self.c_projection = Linear(channels, state_size, rng, bias=False)
        self.dt_projection = Linear(channels, channels, rng)
        dt = np.exp(rng.uniform(np.log(DT_MIN), np.log(DT_MAX), size=channels))
        self.dt_projection.bias = Tensor(dt + np.log(-np.expm1(-dt)), requires_grad=True)
        self.d = Tensor.ones((channels,), requires_grad=True)

    def token_parameters(self, tokens: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """(delta, A, B, C) for a [..., L, C] token sequence."""
        delta = softplus(self.dt_projection(tokens))
        return delta, neg(exp(self.a_log)), self.b_projection(tokens), self.c_projection(tokens)

    def scan(self, tokens: Tensor) -> Tensor:
        delta, a, b, c = self.token_parameters(tokens)
        return selective_scan(tokens, delta, a, b, c, self.d)


def _scan_orders(x: Tensor) -> List[Tensor]:
    batch, channels, height, width = x.shape
    rows = reshape(transpose(x, (0, 2, 3, 1)), (batch, height * width, channels))
    columns = reshape(transpose(x, (0, 3, 2, 1)), (batch, width * height, channels))
    return [rows, flip(rows, 1), columns, flip(columns, 1)]


def directional_scans(x: Tensor, ssm: SsmParams) -> List[Tensor]:
    """
    The four directional scans of a [B, C, H, W] map, each mapped back to [B, C, H, W]

    Order: row-major forward, row-major backward, column-major forward,
    column-major backward. All four run as one batched scan.
    """
    batch, channels, height, width = x.shape
    outputs = split(ssm.scan(concat(_scan_orders(x), axis=0)), 4, axis=0)
    row_fwd, row_bwd, col_fwd, col_bwd = outputs
    row_bwd, col_bwd = flip(row_bwd, 1), flip(col_bwd, 1)

    def from_rows(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, height, width, channels)), (0, 3, 1, 2))

    def from_columns(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, width, height, channels)), (0, 3, 2, 1))

    return [from_rows(row_fwd), from_rows(row_bwd), from_columns(col_fwd), from_columns(col_bwd)]


def cross_scan_2d(x: Tensor, ssm: SsmParams) -> Tensor:
    forward_rows, backward_rows, forward_cols, backward_cols = directional_scans(x, ssm)
    return ((forward_rows + backward_rows) + (forward_cols + backward_cols)) * 0.25


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    ShapeValidator.check_ndim(x.shape, (3, 4), "GSSM input")
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    return x, False


class GatedStateSpace(Module):
    """Multi-scale enhancement, LayerNorm, cross-scan SSM and the nonlinear gated unit."""

    def __init__(self, config: GssmConfig, rng: np.random.Generator):
        channels = config.channels
        self.config = config
        self.multiscale = [Conv2d(channels, channels, k, rng, groups=channels) for k in config.kernel_sizes]
        self.multiscale_fuse = Conv2d(channels, channels, 1, rng)
        self.pointwise = Conv2d(channels, channels, 1, rng)
        self.norm = LayerNorm(channels)
        self.ssm = SsmParams(channels, config.state_size, rng)
        self.gate_expand = Conv2d(channels, 2 * channels, 1, rng)
        self.gate_projection = Conv2d(channels, channels, 1, rng)

    def multiscale_enhance(self, x: Tensor) -> Tensor:
        responses = [conv(x) for conv in self.multiscale]
        total = responses[0]
        for response in responses[1:]:
            total = total + response
        return self.multiscale_fuse(total) + x

    def channel_norm(self, x: Tensor) -> Tensor:
        return transpose(self.norm(transpose(x, (0, 2, 3, 1))), (0, 3, 1, 2))

    def gated_features(self, x: Tensor) -> Tensor:
        """f(X) * Norm(sigma(g(X))) before the output projection."""
        f, g = split(self.gate_expand(x), 2, axis=1)
        gate = gelu(g) if self.config.nonlinear else g
        if self.config.normalize:
            gate = global_avg_pool(gate)
        return f * gate

    def nonlinear_gated_unit(self, x: Tensor) -> Tensor:
        return self.gate_projection(self.gated_features(x))

    def __call__(self, x: Tensor) -> Tensor:
        batched, single = _batched(x)
        if batched.shape[1] != self.config.channels:
            raise ValidationError(
                f"GSSM expects {self.config.channels} channels, got {batched.shape[1]}",
                error_code="SHAPE_MISMATCH",
                category=ValidationError.SHAPE_ERROR,
                step="gssm"
            )
        y = self.multiscale_enhance(batched)
        y = self.channel_norm(self.pointwise(y))
        y = cross_scan_2d(y, self.ssm)
        y = self.nonlinear_gated_unit(y)
        if self.config.residual:
            y = y + batched
        return reshape(y, y.shape[1:]) if single else y


def gssm_forward(x: Tensor, module: GatedStateSpace) -> Tensor:
    return module(x)


def multiscale_enhance(x: Tensor, module: GatedStateSpace) -> Tensor:
    batched, single = _batched(x)
    y = module.multiscale_enhance(batched)
    return reshape(y, y.shape[1:]) if single else y


def nonlinear_gated_unit(x: Tensor, module: GatedStateSpace) -> Tensor:
    batched, single = _batched(x)
    y = module.nonlinear_gated_unit(batched)
    return reshape(y, y.shape[1:]) if single else y

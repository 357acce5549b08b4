#!/usr/bin/env python3
"""
Tensor Engine - dense float64 tensors with reverse-mode differentiation
EmambaIR toolkit, numeric core

LOGIC:
- Every operation computes its result eagerly with numpy and, when any input
  requires a gradient, records its parents plus a backward closure
- backward() orders the recorded graph topologically (the Tape) and walks it
  once in reverse, accumulating gradients in a fixed order
- Tensors are never mutated after creation; only their .grad buffers grow

PRIMITIVES: elementwise arithmetic with trailing-axis broadcasting, matmul,
activations (relu, gelu, sigmoid, softplus, exp, abs), reductions, shape ops,
layer_norm, global_avg_pool, conv2d (grouped / strided / padded),
nearest upsampling, masked softmax, top-k masking and token gathering.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from validation_utils import ShapeValidator, ValidationError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-6
NORMALIZE_EPS = 1e-12
_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording parents (evaluation / metric passes)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """
    n-dimensional float64 array participating in a reverse-mode tape

    Leaf tensors created with requires_grad=True start with a zero gradient
    buffer of identical shape; intermediate results receive theirs during
    backward().
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        if any(extent <= 0 for extent in array.shape):
            raise ValidationError(
                f"Tensor extents must be positive, got shape {array.shape}",
                error_code="EMPTY_TENSOR",
                category=ValidationError.SHAPE_ERROR
            )
        ShapeValidator.check_finite(array, "tensor creation")
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(array) if requires_grad else None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    # Construction helpers

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    # Introspection

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ValidationError(
                f"item() needs a single-element tensor, got shape {self.shape}",
                error_code="SHAPE_MISMATCH",
                category=ValidationError.SHAPE_ERROR
            )
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn,
              op: str) -> Tensor:
    """
    Wrap a freshly computed array as a tape node

    backward_fn maps the output gradient to one gradient (or None) per parent,
    each with its parent's shape. Modules defining fused primitives (the
    selective scan) use this hook directly.
    """
    ShapeValidator.check_finite(data, op)
    node = object.__new__(Tensor)
    node.data = data
    node.grad = None
    node.op = op
    node.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if node.requires_grad:
        node._parents = tuple(parents)
        node._backward = backward_fn
    else:
        node._parents = ()
        node._backward = None
    return node


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, operation: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValidationError(
            f"Incompatible shapes for {operation}: {a.shape} and {b.shape}",
            error_code="SHAPE_MISMATCH",
            category=ValidationError.SHAPE_ERROR,
            suggestions=["Broadcasting aligns trailing axes; each pair must match or be 1"]
        )


# Tape

class Tape:
    """
    Ordered record of executed operations reachable from a root

    nodes are in topological order: every node's inputs precede it.
    """

    _ACTIVE = 1
    _DONE = 2

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        state = {}
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = cls._DONE
                order.append(node)
                continue
            status = state.get(key)
            if status == cls._DONE:
                continue
            if status == cls._ACTIVE:
                raise ValidationError(
                    f"Cycle detected on the tape at op '{node.op}'",
                    error_code="TAPE_CYCLE",
                    severity=ValidationError.CRITICAL,
                    category=ValidationError.NUMERIC_ERROR
                )
            state[key] = cls._ACTIVE
            stack.append((node, True))
            for parent in node._parents:
                if state.get(id(parent)) != cls._DONE:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self, root: Tensor, seed: np.ndarray) -> None:
        grads = {id(root): seed}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def backward(loss: Tensor) -> Tape:
    """Populate .grad of every requires_grad tensor reachable from a scalar loss."""
    if loss.size != 1:
        raise ValidationError(
            f"backward() needs a scalar loss, got shape {loss.shape}",
            error_code="NON_SCALAR_LOSS",
            category=ValidationError.SHAPE_ERROR,
            suggestions=["Reduce the output with mean() or sum() first"]
        )
    tape = Tape.record(loss)
    tape.run_backward(loss, np.ones_like(loss.data))
    logger.debug(f"Backward pass over {len(tape)} tape nodes")
    return tape


# Elementwise arithmetic

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)), "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    return make_node(a.data / b.data, (a, b),
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def neg(x: Tensor) -> Tensor:
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValidationError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}",
            error_code="SHAPE_MISMATCH",
            category=ValidationError.SHAPE_ERROR
        )

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(a.data @ b.data, (a, b), backward_fn, "matmul")


# Activations

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def relu(x: Tensor) -> Tensor:
    return make_node(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x·Φ(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return make_node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    return make_node(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),), "softplus")


def absolute(x: Tensor) -> Tensor:
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


# Reductions

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_node(np.asarray(out, dtype=np.float64), (x,), backward_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes, kept as singleton extents."""
    ShapeValidator.check_ndim(x.shape, (3, 4), "global_avg_pool")
    return mean(x, axis=(-2, -1), keepdims=True)


# Shape operations

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValidationError(
            f"Cannot reshape {x.shape} into {tuple(shape)}",
            error_code="SHAPE_MISMATCH",
            category=ValidationError.SHAPE_ERROR
        )
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    return make_node(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis),), "flip")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValidationError(
            f"Cannot concatenate shapes {[t.shape for t in tensors]} along axis {axis}",
            error_code="SHAPE_MISMATCH",
            category=ValidationError.SHAPE_ERROR
        )
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_node(out, tensors, lambda g: tuple(np.split(g, boundaries, axis=axis)), "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_node(x.data[index].copy(), (x,), backward_fn, "slice")


def split(x: Tensor, sections: Union[int, Sequence[int]], axis: int) -> List[Tensor]:
    extent = x.shape[axis]
    if isinstance(sections, int):
        if extent % sections:
            raise ValidationError(
                f"Axis of extent {extent} cannot be split into {sections} equal parts",
                error_code="SHAPE_MISMATCH",
                category=ValidationError.SHAPE_ERROR
            )
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != extent:
            raise ValidationError(
                f"Split sizes {sizes} do not sum to extent {extent}",
                error_code="SHAPE_MISMATCH",
                category=ValidationError.SHAPE_ERROR
            )
    parts, start = [], 0
    for size in sizes:
        parts.append(slice_axis(x, start, start + size, axis))
        start += size
    return parts


# Normalization

def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the learnable scale and shift."""
    if x.ndim == 0:
        raise ValidationError(
            "layer_norm needs a non-empty last axis",
            error_code="EMPTY_NORMALIZATION_AXIS",
            category=ValidationError.SHAPE_ERROR
        )
    ShapeValidator.check_same_shape(weight.shape, x.shape[-1:], "layer_norm weight")
    ShapeValidator.check_same_shape(bias.shape, x.shape[-1:], "layer_norm bias")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward_fn(g):
        gxhat = g * weight.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(xhat * weight.data + bias.data, (x, weight, bias), backward_fn, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORMALIZE_EPS) -> Tensor:
    """x / max(||x||, eps) along axis; all-zero slices stay zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clamped = np.maximum(norm, eps)
    out = x.data / clamped
    active = norm > eps

    def backward_fn(g):
        radial = out * (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - radial) / clamped, g / clamped),)

    return make_node(out, (x,), backward_fn, "l2_normalize")


# Selection and attention primitives

def topk_retention_mask(values: np.ndarray, k: int, axis: int) -> np.ndarray:
    """
    Boolean mask of the min(k, n) largest entries along axis

    Ties at the threshold are resolved in favour of the lowest index, so the
    retained count is exact and the selection deterministic.
    """
    if int(k) != k or k <= 0:
        raise ValidationError(
            f"top-k needs k >= 1, got {k}",
            error_code="INVALID_K",
            category=ValidationError.CONFIG_ERROR
        )
    moved = np.moveaxis(values, axis, -1)
    n = moved.shape[-1]
    k = min(int(k), n)
    if k == n:
        return np.ones(values.shape, dtype=bool)
    kth = np.partition(moved, n - k, axis=-1)[..., n - k:n - k + 1]
    greater = moved > kth
    needed = k - greater.sum(axis=-1, keepdims=True)
    ties = moved == kth
    mask = greater | (ties & (np.cumsum(ties, axis=-1) <= needed))
    return np.moveaxis(mask, -1, axis)


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Ascending indices of the retained top-k entries along the last axis."""
    mask = topk_retention_mask(values, k, axis=-1)
    k = min(int(k), values.shape[-1])
    columns = np.nonzero(mask.reshape(-1, values.shape[-1]))[1]
    return columns.reshape(values.shape[:-1] + (k,))


def top_k_mask(matrix: Tensor, k: int, axis: int = 0) -> Tensor:
    """
    Keep the min(k, n) largest entries per slice along axis, zero the rest

    The default axis 0 selects per column. Gradients pass straight through
    the retained positions and are zero elsewhere.
    """
    keep = topk_retention_mask(matrix.data, k, axis)
    return make_node(np.where(keep, matrix.data, 0.0), (matrix,),
                     lambda g: (np.where(keep, g, 0.0),), "top_k_mask")


def softmax_axis(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax restricted to retained entries

    Without an explicit mask, entries exactly equal to 0 are excluded (treated
    as -inf logits); excluded entries come out as 0.
    """
    keep = (x.data != 0) if mask is None else np.broadcast_to(mask, x.shape)
    if not np.all(np.any(keep, axis=axis)):
        raise ValidationError(
            "softmax over a fully-masked slice",
            error_code="FULLY_MASKED_SLICE",
            category=ValidationError.NUMERIC_ERROR,
            suggestions=["Every slice needs at least one retained entry"]
        )
    logits = np.where(keep, x.data, -np.inf)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    weights = np.where(keep, np.exp(shifted), 0.0)
    out = weights / weights.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward_fn, "softmax")


def take_along_last(x: Tensor, index: np.ndarray) -> Tensor:
    """x[..., index] per leading position; index has shape x.shape[:-1] + (k,)."""
    n = x.shape[-1]
    rows = x.data.reshape(-1, n)
    flat_index = index.reshape(rows.shape[0], -1)
    row_ids = np.arange(rows.shape[0])[:, None]
    out = rows[row_ids, flat_index].reshape(index.shape)

    def backward_fn(g):
        full = np.zeros_like(rows)
        np.add.at(full, (row_ids, flat_index), g.reshape(flat_index.shape))
        return (full.reshape(x.shape),)

    return make_node(out, (x,), backward_fn, "take_along_last")


def gather_rows(values: Tensor, index: np.ndarray) -> Tensor:
    """
    Gather token rows: values [..., L, d], index [..., Lq, k] -> [..., Lq, k, d]
    """
    lead = values.shape[:-2]
    length, depth = values.shape[-2:]
    flat_values = values.data.reshape(-1, length, depth)
    flat_index = index.reshape((flat_values.shape[0],) + index.shape[-2:])
    batch_ids = np.arange(flat_values.shape[0])[:, None, None]
    out = flat_values[batch_ids, flat_index]

    def backward_fn(g):
        full = np.zeros_like(flat_values)
        np.add.at(full, (batch_ids, flat_index), g.reshape(out.shape))
        return (full.reshape(values.shape),)

    return make_node(out.reshape(lead + index.shape[-2:] + (depth,)), (values,), backward_fn, "gather_rows")


# Convolution and resampling

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """
    Zero-padded grouped 2D cross-correlation

    x [B, C_in, H, W], kernel [C_out, C_in/groups, kH, kW], optional bias [C_out].
    groups == C_in with one filter per channel gives a depth-wise convolution.
    """
    ShapeValidator.check_ndim(x.shape, (4,), "conv2d input")
    ShapeValidator.check_ndim(kernel.shape, (4,), "conv2d kernel")
    if int(stride) != stride or stride <= 0:
        raise ValidationError(
            f"conv2d stride must be a positive integer, got {stride}",
            error_code="INVALID_STRIDE",
            category=ValidationError.CONFIG_ERROR
        )
    batch, c_in, height, width = x.shape
    c_out, per_group, k_h, k_w = kernel.shape
    if groups <= 0 or c_in % groups or c_out % groups:
        raise ValidationError(
            f"Channels ({c_in} in, {c_out} out) not divisible by groups={groups}",
            error_code="GROUPS_NOT_DIVISIBLE",
            category=ValidationError.SHAPE_ERROR
        )
    if per_group * groups != c_in:
        raise ValidationError(
            f"Kernel expects {per_group * groups} input channels, input has {c_in}",
            error_code="SHAPE_MISMATCH",
            category=ValidationError.SHAPE_ERROR
        )
    if k_h > height + 2 * padding or k_w > width + 2 * padding:
        raise ValidationError(
            f"Kernel {k_h}x{k_w} larger than padded input {height + 2 * padding}x{width + 2 * padding}",
            error_code="SHAPE_MISMATCH",
            category=ValidationError.SHAPE_ERROR
        )
    if bias is not None:
        ShapeValidator.check_same_shape(bias.shape, (c_out,), "conv2d bias")

    out_h = (height + 2 * padding - k_h) // stride + 1
    out_w = (width + 2 * padding - k_w) // stride + 1
    outs_per_group = c_out // groups
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k_h, k_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    windows = windows.reshape(batch, groups, per_group, out_h, out_w, k_h, k_w)
    weights = kernel.data.reshape(groups, outs_per_group, per_group, k_h, k_w)
    out = np.einsum("bgchwij,gocij->bgohw", windows, weights, optimize=True)
    out = out.reshape(batch, c_out, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward_fn(g):
        grouped = g.reshape(batch, groups, outs_per_group, out_h, out_w)
        g_kernel = np.einsum("bgohw,bgchwij->gocij", grouped, windows, optimize=True)
        g_windows = np.einsum("bgohw,gocij->bgchwij", grouped, weights, optimize=True)
        g_windows = g_windows.reshape(batch, c_in, out_h, out_w, k_h, k_w)
        g_padded = np.zeros_like(padded)
        row_stop = stride * (out_h - 1) + 1
        col_stop = stride * (out_w - 1) + 1
        for i in range(k_h):
            for j in range(k_w):
                g_padded[:, :, i:i + row_stop:stride, j:j + col_stop:stride] += g_windows[..., i, j]
        g_x = g_padded[:, :, padding:padding + height, padding:padding + width]
        grads = [g_x, g_kernel.reshape(kernel.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, backward_fn, "conv2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    ShapeValidator.check_ndim(x.shape, (4,), "upsample_nearest")
    batch, channels, height, width = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward_fn(g):
        return (g.reshape(batch, channels, height, factor, width, factor).sum(axis=(3, 5)),)

    return make_node(out, (x,), backward_fn, "upsample_nearest")

#!/usr/bin/env python3
"""
Parameter containers and basic layers shared by TSAM, GSSM, RLFB and the UNet

Module keeps parameters as plain attributes; named_parameters() walks them in
attribute-definition order, so names and ordering are deterministic for a
given architecture.
"""

import logging
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from tensor_engine import Tensor, conv2d, layer_norm, matmul
from validation_utils import ShapeValidator, ValidationError

logger = logging.getLogger(__name__)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Named-parameter container with recursive traversal."""

    def _parameter_slots(self, prefix: str = "") -> Iterator[Tuple[str, object, str]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, self, attr
            elif isinstance(value, Module):
                yield from value._parameter_slots(name + ".")
            elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
                for index, child in enumerate(value):
                    yield from child._parameter_slots(f"{name}.{index}.")

    def named_parameters(self) -> Dict[str, Tensor]:
        return {name: getattr(owner, attr) for name, owner, attr in self._parameter_slots()}

    def load_parameters(self, params: Mapping[str, Tensor], strict: bool = True) -> None:
        """Rebind every parameter to the tensor of the same name."""
        expected = set()
        for name, owner, attr in self._parameter_slots():
            expected.add(name)
            if name not in params:
                if strict:
                    raise ValidationError(
                        f"Parameter '{name}' missing from the supplied mapping",
                        error_code="MISSING_PARAMETER",
                        category=ValidationError.DATA_ERROR
                    )
                continue
            current = getattr(owner, attr)
            ShapeValidator.check_same_shape(params[name].shape, current.shape, f"parameter '{name}'")
            setattr(owner, attr, Tensor(params[name].data, requires_grad=True))
        unexpected = sorted(set(params) - expected)
        if strict and unexpected:
            raise ValidationError(
                f"Unexpected parameters: {', '.join(unexpected[:5])}",
                error_code="UNEXPECTED_PARAMETER",
                category=ValidationError.DATA_ERROR
            )

    def fill_parameters(self, value: float = 0.0) -> None:
        for _, owner, attr in self._parameter_slots():
            current = getattr(owner, attr)
            setattr(owner, attr, Tensor(np.full(current.shape, value), requires_grad=True))

    def zero_grad(self) -> None:
        for param in self.named_parameters().values():
            param.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


class Conv2d(Module):
    """2D convolution with fan-in uniform weights and zero bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: Optional[int] = None,
                 groups: int = 1, bias: bool = True, zero_init: bool = False):
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        if zero_init:
            self.weight = Tensor.zeros(shape, requires_grad=True)
        else:
            self.weight = fan_in_uniform(rng, shape, (in_channels // groups) * kernel_size * kernel_size)
        self.bias = Tensor.zeros((out_channels,), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)


class Linear(Module):
    """Token-wise projection: [..., in] @ [in, out] (+ bias)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = fan_in_uniform(rng, (in_features, out_features), in_features)
        self.bias = Tensor.zeros((out_features,), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, features: int):
        self.weight = Tensor.ones((features,), requires_grad=True)
        self.bias = Tensor.zeros((features,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)

#!/usr/bin/env python3
"""
Adam with cosine-annealed learning rate

Training protocol defaults: initial rate 2e-4 annealed to 1e-7 over the
scheduled horizon, beta1 0.9, beta2 0.999, eps 1e-8.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from tensor_engine import Tensor
from validation_utils import ShapeValidator, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Per-parameter Adam moments, step counter and schedule parameters."""

    lr_initial: float = 2e-4
    lr_min: float = 1e-7
    total_steps: int = 200_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def scheduled_lr(self, step: Optional[int] = None) -> float:
        """Cosine annealing from lr_initial (step 0) to lr_min (step total_steps)."""
        step = self.step if step is None else step
        if self.total_steps <= 0:
            return self.lr_initial
        progress = min(max(step, 0), self.total_steps) / self.total_steps
        return self.lr_min + 0.5 * (self.lr_initial - self.lr_min) * (1.0 + math.cos(math.pi * progress))

    def hyperparameters(self) -> Dict[str, float]:
        return {
            "lr_initial": self.lr_initial,
            "lr_min": self.lr_min,
            "total_steps": self.total_steps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
        }


def adam_step(params: Mapping[str, Tensor], state: OptimizerState,
              grads: Optional[Mapping[str, np.ndarray]] = None) -> Tuple[Dict[str, Tensor], OptimizerState]:
    """
    One bias-corrected Adam update

    Args:
        params: named parameter tensors
        state: optimizer state before the update
        grads: named gradients; defaults to each parameter's .grad

    Returns:
        (new parameter tensors, new optimizer state); inputs are left untouched
    """
    if state.step < 0:
        raise ValidationError(
            f"Optimizer step counter must be >= 0, got {state.step}",
            error_code="INVALID_STEP",
            category=ValidationError.CONFIG_ERROR
        )
    grads = {name: p.grad for name, p in params.items()} if grads is None else grads

    for name in sorted(params):
        grad = grads.get(name)
        if grad is None:
            raise ValidationError(
                f"Missing gradient for parameter '{name}'",
                error_code="MISSING_GRADIENT",
                category=ValidationError.NUMERIC_ERROR,
                suggestions=["Run backward() on the loss before stepping"]
            )
        ShapeValidator.check_same_shape(grad.shape, params[name].shape, f"adam_step '{name}'")
        if not np.all(np.isfinite(grad)):
            raise ValidationError(
                f"NaN/Inf gradient for parameter '{name}' at step {state.step}; update aborted",
                error_code="NAN_GRADIENT",
                severity=ValidationError.CRITICAL,
                category=ValidationError.NUMERIC_ERROR,
                suggestions=["Lower lr_initial", "Check the training data for invalid values"]
            )

    lr = state.scheduled_lr(state.step)
    t = state.step + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    new_params: Dict[str, Tensor] = {}
    first, second = {}, {}
    for name in sorted(params):
        param, grad = params[name], grads[name]
        m = state.first_moment.get(name, np.zeros_like(param.data))
        v = state.second_moment.get(name, np.zeros_like(param.data))
        ShapeValidator.check_same_shape(m.shape, param.shape, f"first moment '{name}'")
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        new_params[name] = Tensor(param.data - update, requires_grad=True)
        first[name], second[name] = m, v

    new_state = OptimizerState(
        lr_initial=state.lr_initial, lr_min=state.lr_min, total_steps=state.total_steps,
        beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=t,
        first_moment=first, second_moment=second,
    )
    logger.debug(f"Adam step {t}: lr={lr:.3e}")
    return new_params, new_state

"""
Shared fixtures: seeded generators, central-difference gradient checking,
and direct parameter binding for module-level gradient checks.
"""

from typing import Callable, Optional, Sequence

import numpy as np
import pytest

from tensor_engine import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4,
                    tol: float = 1e-4, max_entries: Optional[int] = None, seed: int = 0) -> None:
    """
    Compare backward() against central differences for every input array

    fn maps Tensors to a scalar Tensor. With max_entries set, only a random
    subset of coordinates per input is checked.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    backward(fn(*tensors))
    rng = np.random.default_rng(seed)
    for i, x in enumerate(inputs):
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(x)
        coordinates = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            coordinates = rng.choice(x.size, max_entries, replace=False)
        numeric = np.zeros(len(coordinates))
        for n, j in enumerate(coordinates):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i].flat[j] += eps
            minus[i].flat[j] -= eps
            with no_grad():
                numeric[n] = (fn(*map(Tensor, plus)).item() - fn(*map(Tensor, minus)).item()) / (2 * eps)
        error = relative_error(analytic.reshape(-1)[coordinates], numeric)
        assert error < tol, f"input {i}: relative gradient error {error:.3e}"


def bind_parameter(module, name: str, value: Tensor) -> None:
    """Point the named parameter slot of a module at an existing tensor."""
    for slot, owner, attr in module._parameter_slots():
        if slot == name:
            setattr(owner, attr, value)
            return
    raise KeyError(name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gradcheck():
    return check_gradients


@pytest.fixture
def bind():
    return bind_parameter

"""Central finite-difference check for scalar functions of one tensor."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ParameterError
from .autodiff import Tensor, backward, enable_grad


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    base = x.data
    flat = base.reshape(-1)
    out = np.empty(flat.size)
    for k in range(flat.size):
        bumped = flat.copy()
        bumped[k] += eps
        plus = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[k] -= 2 * eps
        minus = f(Tensor(bumped.reshape(base.shape))).item()
        out[k] = (plus - minus) / (2 * eps)
    return out.reshape(base.shape)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    with enable_grad():
        leaf = Tensor(x.data, requires_grad=True)
        backward(f(leaf))
    analytic = leaf.grad
    numeric = numeric_grad(f, x, eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0

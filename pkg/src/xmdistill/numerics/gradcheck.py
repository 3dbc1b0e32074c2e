"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import GradTape, Tensor, backward


def finite_diff_check(f, x, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Worst elementwise relative error between ``backward`` and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The denominator of each relative
    error is ``max(|numeric|, |analytic|, floor)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    with GradTape() as tape:
        out = f(leaf)
    analytic = backward(tape, out).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xm = base.copy()
        xp.reshape(-1)[i] += h
        xm.reshape(-1)[i] -= h
        flat[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(numeric - analytic) / denom))

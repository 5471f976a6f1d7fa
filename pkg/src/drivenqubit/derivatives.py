"""Finite-difference time derivatives of sampled matrix series."""
from __future__ import annotations

import numpy as np

# One-sided fourth-order stencils for the first two grid points.
_EDGE4 = np.array([
    [-25.0, 48.0, -36.0, 16.0, -3.0],
    [-3.0, -10.0, 18.0, -6.0, 1.0],
]) / 12.0


def time_derivative(y, h: float, order: int = 2) -> np.ndarray:
    """d/dt of ``y`` sampled with step ``h`` along axis 0.

    ``order=2`` uses centered differences with second-order one-sided
    stencils at both ends; ``order=4`` is the Richardson-extrapolated
    five-point stencil with matching one-sided edges.
    """
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if order == 2:
        if n < 3:
            raise ValueError("need at least 3 samples")
        return np.gradient(y, h, axis=0, edge_order=2)
    if order != 4:
        raise ValueError("order must be 2 or 4")
    if n < 5:
        raise ValueError("need at least 5 samples")
    out = np.empty_like(y)
    out[2:-2] = (y[:-4] - 8.0 * y[1:-3] + 8.0 * y[3:-1] - y[4:]) / (12.0 * h)
    head = y[:5]
    tail = y[-5:][::-1]
    for i in range(2):
        w = _EDGE4[i].reshape((5,) + (1,) * (y.ndim - 1))
        out[i] = (w * head).sum(axis=0) / h
        out[n - 1 - i] = -(w * tail).sum(axis=0) / h
    return out

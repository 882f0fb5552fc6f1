"""Two-point zero-order gradient estimation."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument


class ProbePair(NamedTuple):
    x_plus: np.ndarray
    x_minus: np.ndarray
    xi: np.ndarray
    epsilon: float


def probe_points(x, xi, epsilon):
    """Forward and backward exploration points ``x +/- epsilon * xi``."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if x.shape != xi.shape:
        raise InvalidArgument(f"dimension mismatch: x{x.shape} vs xi{xi.shape}")
    if not epsilon > 0:
        raise InvalidArgument(f"epsilon must be positive, got {epsilon}")
    step = epsilon * xi
    return ProbePair(x + step, x - step, xi, float(epsilon))


def two_point_estimate(f_plus, f_minus, xi, epsilon):
    """Return ``xi * (f_plus - f_minus) / (2 epsilon)``.

    For ``F`` of class C^3 this equals ``xi xi^T grad F(x) + O(epsilon^2)``,
    and is exact when ``F`` is quadratic.  The function values may be noisy
    measurements.
    """
    if not epsilon > 0:
        raise InvalidArgument(f"epsilon must be positive, got {epsilon}")
    return np.asarray(xi, dtype=float) * ((f_plus - f_minus) / (2.0 * epsilon))

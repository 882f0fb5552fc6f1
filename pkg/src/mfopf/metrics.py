"""Tracking and voltage-quality metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument, UndefinedMetric


def nrmse(p0, p0_ref):
    """Normalized RMS tracking error ``sqrt(mean(((P0 - P0*) / P0*)^2))``."""
    p0 = np.asarray(p0, dtype=float)
    ref = np.asarray(p0_ref, dtype=float)
    if p0.shape != ref.shape or p0.ndim != 1:
        raise InvalidArgument(f"traces must be 1-D with equal length, got {p0.shape} and {ref.shape}")
    if p0.size == 0:
        raise UndefinedMetric("NRMSE of an empty trace")
    if np.any(ref == 0):
        raise UndefinedMetric(f"zero reference sample at step {int(np.flatnonzero(ref == 0)[0])}")
    return float(np.sqrt(np.mean(((p0 - ref) / ref) ** 2)))


def avv(v, lower, upper):
    """Average voltage violation over ``K`` steps and ``N`` nodes.

    ``v`` has shape ``(K, N)`` (a 1-D vector is one step).  Limits broadcast
    against the node axis.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    try:
        viol = np.maximum(v - hi, 0.0) + np.maximum(lo - v, 0.0)
    except ValueError as exc:
        raise InvalidArgument(f"voltage trace {v.shape} does not match limits") from exc
    if viol.size == 0:
        return 0.0
    return float(viol.mean())


def violation_episodes(v, lower, upper, dt):
    """Longest contiguous violation (seconds) at any single node."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    bad = (v > upper) | (v < lower)
    longest = 0
    for col in bad.T:
        run = 0
        for b in col:
            run = run + 1 if b else 0
            longest = max(longest, run)
    return longest * dt


@dataclass
class MetricsReport:
    nrmse: float
    avv: float
    nrmse_tail: float
    steps: int
    runtime_s: float
    controlled: bool = True
    halted_at: int | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

"""Feasible sets and Euclidean projections for primal and dual variables."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleSet, InvalidArgument, NumericError

log = logging.getLogger(__name__)

DYKSTRA_TOL = 1e-10
DYKSTRA_MAX_SWEEPS = 500


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise InvalidArgument(f"box bounds shape mismatch {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            raise InfeasibleSet(f"box lower bound exceeds upper: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def project(self, z):
        return project_box(z, self)

    def contains(self, z, tol=0.0):
        z = np.asarray(z, dtype=float)
        return bool(np.all(z >= self.lower - tol) and np.all(z <= self.upper + tol))


@dataclass(frozen=True)
class Disc:
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise InvalidArgument(f"disc radius must be non-negative, got {self.radius}")

    def project(self, pq):
        return project_disc(pq, self)

    def contains(self, pq, tol=0.0):
        return float(np.hypot(pq[0], pq[1])) <= self.radius + tol


@dataclass(frozen=True)
class BoxDiscSet:
    """``{(p, q): p_min <= p <= p_max, p^2 + q^2 <= S^2}``."""

    p_min: float
    p_max: float
    radius: float

    def __post_init__(self):
        if self.p_min > self.p_max:
            raise InfeasibleSet(f"empty p-interval [{self.p_min}, {self.p_max}]")
        if self.radius < 0:
            raise InvalidArgument(f"disc radius must be non-negative, got {self.radius}")

    @property
    def is_empty(self):
        return self.p_max < -self.radius or self.p_min > self.radius

    def project(self, pq):
        return project_box_disc(pq, self)

    def contains(self, pq, tol=0.0):
        p, q = float(pq[0]), float(pq[1])
        return (
            self.p_min - tol <= p <= self.p_max + tol
            and p * p + q * q <= (self.radius + tol) ** 2
        )


@dataclass(frozen=True)
class DualBox:
    """``{lam: 0 <= lam <= lambda_max}``."""

    lambda_max: np.ndarray

    def __post_init__(self):
        cap = np.atleast_1d(np.asarray(self.lambda_max, dtype=float))
        if np.any(cap < 0):
            raise InvalidArgument("dual caps must be non-negative")
        object.__setattr__(self, "lambda_max", cap)

    @classmethod
    def uniform(cls, m, cap=100.0):
        return cls(np.full(m, float(cap)))

    def project(self, lam):
        return project_dual(lam, self)

    def contains(self, lam, tol=0.0):
        lam = np.asarray(lam, dtype=float)
        return bool(np.all(lam >= -tol) and np.all(lam <= self.lambda_max + tol))


def project_box(z, box):
    z = np.asarray(z, dtype=float)
    if z.shape != box.lower.shape:
        raise InvalidArgument(f"dimension mismatch: z{z.shape} vs box{box.lower.shape}")
    return np.minimum(np.maximum(z, box.lower), box.upper)


def project_disc(pq, disc):
    pq = np.asarray(pq, dtype=float)
    r = float(np.hypot(pq[0], pq[1]))
    if r <= disc.radius:
        return pq.copy()
    if disc.radius == 0.0:
        return np.zeros(2)
    return pq * (disc.radius / r)


def _clamp_p(v, s):
    return np.array([min(max(v[0], s.p_min), s.p_max), v[1]])


def _box_disc_candidates(z, s):
    """Points the projection can land on: ``z``, the disc and box projections, the corners."""
    r = s.radius
    yield z
    yield project_disc(z, Disc(r))
    yield _clamp_p(z, s)
    for c in (s.p_min, s.p_max):
        if abs(c) <= r:
            h = float(np.sqrt(max(r * r - c * c, 0.0)))
            yield np.array([c, h])
            yield np.array([c, -h])


def project_box_disc(pq, s, method="exact", tol=DYKSTRA_TOL, max_sweeps=DYKSTRA_MAX_SWEEPS):
    """Euclidean projection onto a p-interval intersected with a disc.

    ``method="exact"`` enumerates the KKT cases (interior, disc active, box
    active, a box/circle corner) and returns the nearest feasible
    candidate.  ``method="dykstra"`` runs Dykstra's alternating projections
    with correction terms, which converge to the same point; near corners
    far from the disc the iteration can need thousands of sweeps.

    Raises
    ------
    InfeasibleSet
        If the interval misses ``[-S, S]``.
    NumericError
        If Dykstra does not reach ``tol`` within ``max_sweeps`` sweeps.
    """
    if s.is_empty:
        raise InfeasibleSet(
            f"p-interval [{s.p_min}, {s.p_max}] does not meet disc of radius {s.radius}"
        )
    x = np.asarray(pq, dtype=float)
    if x.shape != (2,):
        raise InvalidArgument(f"expected a (p, q) pair, got shape {x.shape}")
    if s.contains(x):
        return x.copy()
    if method == "dykstra":
        return _dykstra_box_disc(x, s, tol, max_sweeps)
    if method != "exact":
        raise InvalidArgument(f"unknown projection method {method!r}")
    best, best_d = None, np.inf
    for cand in _box_disc_candidates(x, s):
        if s.contains(cand, tol=1e-12):
            d = float(np.sum((cand - x) ** 2))
            if d < best_d:
                best, best_d = cand, d
    return best.copy()


def _dykstra_box_disc(x, s, tol, max_sweeps):
    disc = Disc(s.radius)
    inc_box = np.zeros(2)
    inc_disc = np.zeros(2)
    for sweep in range(1, max_sweeps + 1):
        y = _clamp_p(x + inc_box, s)
        inc_box = x + inc_box - y
        x_new = project_disc(y + inc_disc, disc)
        inc_disc = y + inc_disc - x_new
        if max(np.abs(x_new - x).max(), np.abs(x_new - y).max()) < tol:
            # snap the residual box error when that keeps the point in the disc
            snapped = _clamp_p(x_new, s)
            return snapped if s.contains(snapped) else x_new
        x = x_new
    log.debug("Dykstra stalled at %s after %d sweeps", x, max_sweeps)
    raise NumericError(
        f"box-disc projection did not converge in {max_sweeps} sweeps", iterations=max_sweeps
    )


def project_dual(lam, dual_box):
    lam = np.asarray(lam, dtype=float)
    if lam.shape != dual_box.lambda_max.shape:
        raise InvalidArgument(
            f"dimension mismatch: lambda{lam.shape} vs caps{dual_box.lambda_max.shape}"
        )
    return np.minimum(np.maximum(lam, 0.0), dual_box.lambda_max)


def project_primal(x, blocks):
    """Project ``x`` block by block.

    ``blocks`` is a sequence of ``(index, set)`` pairs; ``index`` selects the
    entries of ``x`` the set acts on.  Entries not covered by any block are
    left unconstrained.
    """
    out = np.array(x, dtype=float, copy=True)
    for idx, s in blocks:
        if s is None:
            continue
        out[idx] = s.project(out[idx])
    return out


def primal_violation(x, blocks):
    """Largest constraint violation of ``x`` over the blocks (0 when feasible)."""
    worst = 0.0
    x = np.asarray(x, dtype=float)
    for idx, s in blocks:
        if s is None:
            continue
        v = x[idx]
        if isinstance(s, BoxDiscSet):
            worst = max(worst, s.p_min - v[0], v[0] - s.p_max, float(np.hypot(v[0], v[1])) - s.radius)
        elif isinstance(s, Box):
            worst = max(worst, float(np.max(s.lower - v)), float(np.max(v - s.upper)))
        elif isinstance(s, Disc):
            worst = max(worst, float(np.hypot(v[0], v[1])) - s.radius)
    return max(worst, 0.0)

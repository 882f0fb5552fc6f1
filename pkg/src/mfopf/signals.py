"""Deterministic sinusoidal exploration signals.

A bank of ``n`` sinusoids ``xi_i(t) = a * sin(2*pi*f_i*t)`` with pairwise
distinct frequencies.  With amplitude ``sqrt(2)`` the time-averaged outer
product ``xi xi^T`` over a common period is the identity matrix; when the
frequencies share no common period the average converges to the identity at
rate ``O(1/horizon)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InvalidConfiguration

SQRT2 = math.sqrt(2.0)


def _as_fraction(f, max_denominator):
    frac = Fraction(f).limit_denominator(max_denominator)
    if abs(float(frac) - f) > 1e-12 * abs(f):
        return None
    return frac


def common_period(frequencies, max_denominator=1000):
    """Least common period of the given frequencies, or ``None``.

    Each frequency is matched to a rational with denominator at most
    ``max_denominator``; if any fails to match, the bank is treated as
    incommensurate.
    """
    fracs = [_as_fraction(f, max_denominator) for f in frequencies]
    if any(fr is None for fr in fracs):
        return None
    # period_i = den_i / num_i; lcm of rationals = lcm(numerators) / gcd(denominators)
    num = 1
    den = 0
    for fr in fracs:
        num = math.lcm(num, fr.denominator)
        den = math.gcd(den, fr.numerator)
    return num / den


@dataclass(frozen=True)
class ExplorationSignal:
    """Immutable bank of sinusoidal probe waveforms.

    Attributes
    ----------
    frequencies : tuple of float
        Per-channel frequency in Hz.
    amplitude : tuple of float
        Per-channel scale.
    period : float or None
        Common period in seconds, ``None`` for incommensurate banks.
    dt : float
        Sampling step in seconds used by the stepping loops.
    """

    frequencies: tuple
    amplitude: tuple
    period: float | None
    dt: float = 1.0

    @property
    def n(self) -> int:
        return len(self.frequencies)

    def sample(self, t: float) -> np.ndarray:
        f = np.asarray(self.frequencies)
        return np.asarray(self.amplitude) * np.sin(2.0 * np.pi * f * t)

    def period_steps(self) -> int | None:
        """Number of sampling steps in one period, if it is an integer."""
        if self.period is None:
            return None
        steps = self.period / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            return None
        return int(round(steps))

    def subset(self, channels: Sequence[int]) -> "ExplorationSignal":
        """Signal restricted to the given channels (period kept from the full bank)."""
        idx = list(channels)
        return ExplorationSignal(
            tuple(self.frequencies[i] for i in idx),
            tuple(self.amplitude[i] for i in idx),
            self.period,
            self.dt,
        )


def make_sinusoid_bank(n, frequencies, amplitude=SQRT2, dt=1.0, max_denominator=1000):
    """Build an :class:`ExplorationSignal` from explicit frequencies.

    Raises
    ------
    InvalidConfiguration
        If ``n < 1``, the frequency count differs from ``n``, or any
        frequency is non-positive or duplicated.
    """
    freqs = tuple(float(f) for f in frequencies)
    if n < 1:
        raise InvalidConfiguration(f"need at least one channel, got n={n}")
    if len(freqs) != n:
        raise InvalidConfiguration(f"expected {n} frequencies, got {len(freqs)}")
    if any(not f > 0 for f in freqs):
        raise InvalidConfiguration(f"frequencies must be strictly positive: {freqs}")
    if len(set(freqs)) != n:
        raise InvalidConfiguration(f"frequencies must be pairwise distinct: {freqs}")
    if dt <= 0:
        raise InvalidConfiguration(f"dt must be positive, got {dt}")
    if np.ndim(amplitude) == 0:
        amp = (float(amplitude),) * n
    else:
        amp = tuple(float(a) for a in amplitude)
        if len(amp) != n:
            raise InvalidConfiguration(f"expected {n} amplitudes, got {len(amp)}")
    return ExplorationSignal(freqs, amp, common_period(freqs, max_denominator), float(dt))


def assign_frequencies(n, mode="band", *, period=None, multiples=None, f_min=None, f_max=None):
    """Pick ``n`` pairwise distinct frequencies.

    ``mode="integer-cycles"`` returns ``m_i / period`` so that the bank has
    the exact common period ``period``.  ``mode="band"`` spreads ``n`` values
    evenly over ``[f_min, f_max]`` (the midpoint when ``n == 1``).
    """
    if n < 1:
        raise InvalidConfiguration(f"need at least one channel, got n={n}")
    if mode == "integer-cycles":
        if period is None or period <= 0:
            raise InvalidConfiguration("integer-cycles mode needs a positive period")
        if multiples is None:
            multiples = list(range(1, n + 1))
        m = [int(v) for v in multiples]
        if len(m) < n:
            raise InvalidConfiguration(
                f"{n} channels requested but only {len(m)} cycle multiples given"
            )
        m = m[:n]
        if any(v <= 0 for v in m) or len(set(m)) != n:
            raise InvalidConfiguration(f"cycle multiples must be distinct positive integers: {m}")
        return [v / period for v in m]
    if mode == "band":
        if f_min is None or f_max is None:
            raise InvalidConfiguration("band mode needs f_min and f_max")
        if not 0 < f_min < f_max:
            raise InvalidConfiguration(f"empty frequency band [{f_min}, {f_max}]")
        if n == 1:
            return [0.5 * (f_min + f_max)]
        freqs = [float(f) for f in np.linspace(f_min, f_max, n)]
        if len(set(freqs)) != n:
            raise InvalidConfiguration(f"band [{f_min}, {f_max}] cannot hold {n} distinct frequencies")
        return freqs
    raise InvalidConfiguration(f"unknown frequency mode {mode!r}")


def sample(signal: ExplorationSignal, t: float) -> np.ndarray:
    """Probe vector ``xi(t)``."""
    return signal.sample(t)


def empirical_covariance(signal, t0, horizon, dt):
    """Riemann-sum estimate of ``(1/horizon) * integral xi xi^T`` over ``[t0, t0+horizon)``."""
    if horizon <= 0 or dt <= 0:
        raise InvalidConfiguration("horizon and dt must be positive")
    steps = int(round(horizon / dt))
    t = t0 + dt * np.arange(steps)
    f = np.asarray(signal.frequencies)
    xi = np.asarray(signal.amplitude)[:, None] * np.sin(2.0 * np.pi * f[:, None] * t[None, :])
    return (xi @ xi.T) * dt / horizon


def covariance_deviation(signal, t0, horizon, dt, window=2.0, points=21):
    """Envelope of ``max |cov - I|`` over averaging horizons in ``[horizon, window*horizon]``.

    For incommensurate banks the deviation at a single horizon oscillates
    under a ``C/horizon`` envelope; taking the maximum over a window of
    horizons recovers that envelope.
    """
    if window < 1 or points < 1:
        raise InvalidConfiguration("window must be >= 1 and points >= 1")
    eye = np.eye(signal.n)
    return max(
        float(np.max(np.abs(empirical_covariance(signal, t0, h, dt) - eye)))
        for h in np.linspace(horizon, window * horizon, points)
    )

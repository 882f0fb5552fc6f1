"""Real-time OPF on a distribution feeder with batteries and PV inverters.

Controls are per-DER ``(p, q)`` pairs in MW / MVAr.  Battery ``p > 0`` means
charging (the network sees an injection of ``-p - jq``); PV ``p > 0`` means
generation (injection ``p + jq``).  Plant outputs are per unit:
``y = (v_1, ..., v_n, P0)``.

The primal update decomposes per DER: the coordinator gathers the three
measurements, reduces them to one scalar, and each DER updates its own
``(p, q)`` from that scalar and local data.
"""

from __future__ import annotations

import logging
import queue
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .engine import PrimalDualState, StepRecord, TimeVaryingProblem
from .errors import InvalidArgument, NumericError
from .plant import SLOT_APPLIED, SLOT_MINUS, SLOT_PLUS, measure, solve_power_flow
from .sets import BoxDiscSet, DualBox, project_box_disc, project_dual

log = logging.getLogger(__name__)


@dataclass
class Battery:
    node: str
    soc: float
    soc_min: float = 0.0
    soc_max: float = 30.0
    p_min: float = -10.0
    p_max: float = 10.0
    s_rated: float = 12.0
    efficiency: float = 0.9
    c_p: float = 1.0 / 6.0 * 1e-4
    c_q: float = 1.0 / 6.0 * 1e-4
    c_pref: float = 1.0 / 6.0 * 1e-4
    soc_target: float | None = None
    ref_horizon_h: float = 1.0

    kind = "battery"

    def __post_init__(self):
        self.node = str(self.node)
        if not self.soc_min <= self.soc <= self.soc_max:
            raise InvalidArgument(f"battery {self.node}: SOC {self.soc} outside [{self.soc_min}, {self.soc_max}]")
        if not self.p_min <= 0 <= self.p_max:
            raise InvalidArgument(f"battery {self.node}: power box must contain 0")
        if not 0 < self.efficiency <= 1:
            raise InvalidArgument(f"battery {self.node}: efficiency must be in (0, 1]")
        if self.soc_target is None:
            self.soc_target = 0.5 * (self.soc_min + self.soc_max)

    def reference(self, k):
        """Power (charging positive) that steers SOC toward its target."""
        ref = (self.soc_target - self.soc) / self.ref_horizon_h
        return min(max(ref, self.p_min), self.p_max)


@dataclass
class Pv:
    node: str
    s_rated: float
    available: np.ndarray  # MW per step
    c_p: float = 1e-5
    c_q: float = 1e-5
    c_pref: float = 1e-3

    kind = "pv"

    def __post_init__(self):
        self.node = str(self.node)
        self.available = np.asarray(self.available, dtype=float)
        if np.any(self.available < 0):
            raise InvalidArgument(f"PV {self.node}: negative available power")
        self.available = np.minimum(self.available, self.s_rated)

    def reference(self, k):
        return float(self.available[min(k, len(self.available) - 1)])


@dataclass(frozen=True)
class VoltageLimits:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise InvalidArgument("voltage limits need lower < upper with matching shapes")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, n, lower=0.96, upper=1.04):
        return cls(np.full(n, lower), np.full(n, upper))

    def tightened(self, margin):
        return VoltageLimits(self.lower + margin, self.upper - margin)


def battery_power_bounds(batt, dt):
    """Feasible charging-power interval for one step of ``dt`` hours.

    Intersects the power box with the energy guard so that applying any
    power in the interval keeps SOC inside its bounds under the efficiency
    model of :func:`soc_update`.
    """
    if dt <= 0:
        raise InvalidArgument(f"dt must be positive, got {dt}")
    eta = batt.efficiency
    lo = max(batt.p_min, eta * (batt.soc_min - batt.soc) / dt)
    hi = min(batt.p_max, (batt.soc_max - batt.soc) / (eta * dt))
    if lo > hi:
        raise NumericError(f"battery {batt.node}: empty power interval [{lo}, {hi}]")
    return lo, hi


def soc_update(batt, x_p, dt):
    """Next SOC after applying charging power ``x_p`` (MW) for ``dt`` hours."""
    if x_p >= 0:
        soc = batt.soc + batt.efficiency * x_p * dt
    else:
        soc = batt.soc + x_p * dt / batt.efficiency
    clamped = min(max(soc, batt.soc_min), batt.soc_max)
    if clamped != soc:
        log.debug("battery %s: SOC %.12g clamped to %.12g", batt.node, soc, clamped)
    return clamped


def der_set(der, k, dt):
    """Per-DER feasible set at step ``k``."""
    if der.kind == "battery":
        lo, hi = battery_power_bounds(der, dt)
        return BoxDiscSet(lo, hi, der.s_rated)
    return BoxDiscSet(0.0, der.reference(k), der.s_rated)


def der_local_gradient(der, x_i, k):
    p, q = float(x_i[0]), float(x_i[1])
    ref = der.reference(k)
    return np.array([2.0 * der.c_p * p + 2.0 * der.c_pref * (p - ref), 2.0 * der.c_q * q])


def der_local_cost(der, x_i, k):
    p, q = float(x_i[0]), float(x_i[1])
    return der.c_p * p * p + der.c_q * q * q + der.c_pref * (p - der.reference(k)) ** 2


def voltage_constraints(v, limits):
    """``g = (v - V_upper, V_lower - v)``; positive entries are violations."""
    v = np.asarray(v, dtype=float)
    if v.shape != limits.lower.shape:
        raise InvalidArgument(f"voltage vector {v.shape} vs limits {limits.lower.shape}")
    return np.concatenate([v - limits.upper, limits.lower - v])


def coordinator_broadcast_scalar(f0_plus, f0_minus, g_plus, g_minus, lam, epsilon):
    """Scalar shared by all DERs: ``([f0+ - f0-] + lam . [g+ - g-]) / (2 eps)``."""
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    diff = f0_plus - f0_minus
    lam = np.asarray(lam, dtype=float)
    if lam.size:
        diff += lam @ (np.asarray(g_plus, dtype=float) - np.asarray(g_minus, dtype=float))
    return diff / (2.0 * epsilon)


def der_local_update(der, x_i, xi_i, s, alpha_i, p_reg, k, dt, k_apply=None):
    """Projected local primal step using only local data and the broadcast scalar.

    The gradient uses step ``k``; the result is projected onto the DER set of
    ``k_apply`` (default ``k``), the step at which it will be applied.
    """
    x_i = np.asarray(x_i, dtype=float)
    alpha_i = np.asarray(alpha_i, dtype=float)
    grad = der_local_gradient(der, x_i, k) + np.asarray(xi_i, dtype=float) * s
    z = (1.0 - alpha_i * p_reg) * x_i - alpha_i * grad
    return project_box_disc(z, der_set(der, k if k_apply is None else k_apply, dt))


def dual_update_voltage(lam, g_measured, alpha_dual, d, dual_box):
    a = np.asarray(alpha_dual, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return project_dual((1.0 - a * d) * lam + a * np.asarray(g_measured, dtype=float), dual_box)


class FeederPlant:
    """Nonlinear feeder seen through the DER fleet.

    ``loads`` is a ``(K, n)`` complex array of per-unit consumption at the
    PQ nodes for each step.  :meth:`evaluate` is side-effect free (used for
    probes); :meth:`apply` also advances battery SOC.
    """

    def __init__(self, feeder, loads, fleet, dt_h):
        self.feeder = feeder
        self.loads = np.asarray(loads, dtype=complex)
        if self.loads.ndim != 2 or self.loads.shape[1] != feeder.n:
            raise InvalidArgument(f"loads must have shape (K, {feeder.n})")
        self.fleet = list(fleet)
        self.dt_h = dt_h
        self._node_idx = np.array([feeder.index(d.node) for d in self.fleet], dtype=int)
        self._sign = np.array([-1.0 if d.kind == "battery" else 1.0 for d in self.fleet])
        self.last_result = None

    @property
    def n_inputs(self):
        return 2 * len(self.fleet)

    @property
    def n_outputs(self):
        return self.feeder.n + 1

    def injections(self, x, k):
        s = -self.loads[min(k, len(self.loads) - 1)].copy()
        if self.fleet:
            x = np.asarray(x, dtype=float).reshape(-1, 2)
            der = self._sign * (x[:, 0] + 1j * x[:, 1]) / self.feeder.s_base
            np.add.at(s, self._node_idx, der)
        return s

    def evaluate(self, x, k=0):
        res = solve_power_flow(self.feeder, self.injections(x, k))
        self.last_result = res
        return np.append(res.v, res.p0)

    def apply(self, x, k=0):
        y = self.evaluate(x, k)
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        for dev, (p, _) in zip(self.fleet, x):
            if dev.kind == "battery":
                dev.soc = soc_update(dev, p, self.dt_h)
        return y


@dataclass
class OpfSpec:
    """Objective and constraint data shared by the monolithic and distributed loops."""

    reference_pu: np.ndarray  # P0 reference per step, per unit
    limits: VoltageLimits  # limits enforced by the controller
    p: float = 1e-5
    d: float = 0.05
    dual_cap: float = 100.0

    def ref(self, k):
        return float(self.reference_pu[min(k, len(self.reference_pu) - 1)])

    def f0(self, k, y):
        return (y[-1] - self.ref(k)) ** 2

    def g(self, k, y):
        return voltage_constraints(y[:-1], self.limits)

    @property
    def n_constraints(self):
        return 2 * self.limits.lower.size

    def dual_box(self):
        return DualBox.uniform(self.n_constraints, self.dual_cap)


def build_problem(fleet, spec, dt_h, n_outputs):
    """Monolithic :class:`TimeVaryingProblem` for the OPF."""
    nv = n_outputs - 1
    dual_box = spec.dual_box()
    jac = np.zeros((2 * nv, n_outputs))
    jac[:nv, :nv] = np.eye(nv)
    jac[nv:, :nv] = -np.eye(nv)

    def local_grad(k, x):
        x = x.reshape(-1, 2)
        return np.concatenate([der_local_gradient(d, x[i], k) for i, d in enumerate(fleet)]) if fleet else np.zeros(0)

    def local_cost(k, x):
        x = x.reshape(-1, 2)
        return sum(der_local_cost(d, x[i], k) for i, d in enumerate(fleet))

    def primal_sets(k):
        return [(slice(2 * i, 2 * i + 2), der_set(d, k, dt_h)) for i, d in enumerate(fleet)]

    def grad_f0(k, y):
        out = np.zeros(n_outputs)
        out[-1] = 2.0 * (y[-1] - spec.ref(k))
        return out

    return TimeVaryingProblem(
        n=2 * len(fleet),
        local_grad=local_grad,
        f0=spec.f0,
        g=spec.g,
        n_constraints=spec.n_constraints,
        local_cost=local_cost,
        primal_sets=primal_sets,
        dual_set=lambda k: dual_box,
        grad_f0=grad_f0,
        jac_g=lambda k, y: jac,
        p=spec.p,
        d=spec.d,
        set_lead=1,
    )


def block_step_sizes(fleet, alpha_pv=(2.0, 2.0), alpha_bt=(12.0, 12.0)):
    """Stacked per-coordinate primal step sizes for the fleet."""
    out = []
    for d in fleet:
        out.extend(alpha_bt if d.kind == "battery" else alpha_pv)
    return np.array(out, dtype=float)


def nominal_setpoints(fleet, k):
    """Uncontrolled operating point: PV at available power, batteries idle."""
    x = np.zeros(2 * len(fleet))
    for i, d in enumerate(fleet):
        if d.kind == "pv":
            x[2 * i] = d.reference(k)
    return x


# -- gather-and-broadcast -----------------------------------------------------


class ProbeReport(NamedTuple):
    index: int
    x: np.ndarray
    x_plus: np.ndarray
    x_minus: np.ndarray


class Broadcast(NamedTuple):
    k: int
    s: float


class DerAgent:
    """Local controller of one DER; sees only its device, its probe channels and the broadcast scalar."""

    def __init__(self, index, device, signal, alpha, p_reg, epsilon, dt_h, x0):
        self.index = index
        self.device = device
        self.signal = signal
        self.alpha = np.asarray(alpha, dtype=float)
        self.p_reg = p_reg
        self.epsilon = epsilon
        self.dt_h = dt_h
        self.x = np.asarray(x0, dtype=float)
        self.inbox = queue.SimpleQueue()
        self._xi = None

    def report(self, k, t):
        self._xi = self.signal.sample(t)
        return ProbeReport(self.index, self.x, self.x + self.epsilon * self._xi, self.x - self.epsilon * self._xi)

    def process(self):
        msg = self.inbox.get_nowait()
        self.x = der_local_update(
            self.device, self.x, self._xi, msg.s, self.alpha, self.p_reg, msg.k, self.dt_h, msg.k + 1
        )


class Coordinator:
    """Gathers probe reports, measures the feeder, updates the voltage duals, broadcasts one scalar."""

    def __init__(self, agents, plant, spec, alpha_dual, epsilon, noise=None, average_third=False):
        self.agents = list(agents)
        self.plant = plant
        self.spec = spec
        self.alpha_dual = np.broadcast_to(np.asarray(alpha_dual, dtype=float), (spec.n_constraints,)).copy()
        self.dual_box = spec.dual_box()
        self.lam = np.zeros(spec.n_constraints)
        self.epsilon = epsilon
        self.noise = noise
        self.average_third = average_third
        self.inbox = queue.SimpleQueue()

    def _stack(self, reports, field_name):
        if not reports:
            return np.zeros(0)
        return np.concatenate([getattr(r, field_name) for r in reports])

    def round(self, k, t):
        """Run one synchronous round and return ``(y_true, y_hat, s)``."""
        for agent in self.agents:
            self.inbox.put(agent.report(k, t))
        reports = sorted((self.inbox.get_nowait() for _ in self.agents), key=lambda r: r.index)
        x_plus = self._stack(reports, "x_plus")
        x_minus = self._stack(reports, "x_minus")
        x = self._stack(reports, "x")
        y_plus = measure(self.plant.evaluate(x_plus, k), self.noise, k, SLOT_PLUS)
        y_minus = measure(self.plant.evaluate(x_minus, k), self.noise, k, SLOT_MINUS)
        y_true = self.plant.apply(x, k)
        y_hat = 0.5 * (y_plus + y_minus) if self.average_third else measure(y_true, self.noise, k, SLOT_APPLIED)

        spec = self.spec
        s = coordinator_broadcast_scalar(
            spec.f0(k, y_plus), spec.f0(k, y_minus), spec.g(k, y_plus), spec.g(k, y_minus), self.lam, self.epsilon
        )
        self.lam = dual_update_voltage(self.lam, spec.g(k, y_hat), self.alpha_dual, spec.d, self.dual_box)
        for agent in self.agents:
            agent.inbox.put(Broadcast(k, s))
        for agent in self.agents:
            agent.process()
        return y_true, y_hat, s


class GatherBroadcastController:
    """Distributed model-free OPF loop over a feeder plant."""

    def __init__(self, plant, spec, signal, alpha, alpha_dual, epsilon, noise=None,
                 average_third=False, x0=None, t0=0.0):
        fleet = plant.fleet
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (2 * len(fleet),))
        if fleet and (signal is None or signal.n != 2 * len(fleet)):
            raise InvalidArgument(f"probe signal must have {2 * len(fleet)} channels")
        x0 = nominal_setpoints(fleet, 0) if x0 is None else np.asarray(x0, dtype=float)
        self.agents = [
            DerAgent(i, dev, signal.subset([2 * i, 2 * i + 1]), alpha[2 * i:2 * i + 2], spec.p, epsilon,
                     plant.dt_h, project_box_disc(x0[2 * i:2 * i + 2], der_set(dev, 0, plant.dt_h)))
            for i, dev in enumerate(fleet)
        ]
        self.coordinator = Coordinator(self.agents, plant, spec, alpha_dual, epsilon, noise, average_third)
        self.signal = signal
        self.dt = signal.dt if signal is not None else 1.0
        self.k = 0
        self.t = t0

    @property
    def x(self):
        if not self.agents:
            return np.zeros(0)
        return np.concatenate([a.x for a in self.agents])

    @property
    def lam(self):
        return self.coordinator.lam

    @property
    def state(self):
        return PrimalDualState(self.x, self.lam.copy(), self.k, self.t)

    def step(self):
        k, t = self.k, self.t
        x, lam = self.x, self.lam.copy()
        y_true, y_hat, s = self.coordinator.round(k, t)
        self.k += 1
        self.t += self.dt
        return StepRecord(k, t, x, lam, y_true, y_hat, abs(s), self.coordinator.spec.f0(k, y_hat))

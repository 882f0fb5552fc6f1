"""Physical-system models: linear plant, AC feeder power flow, measurement noise."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument, InvalidConfiguration, PowerFlowDivergence

PF_TOL = 1e-10
PF_MAX_ITER = 50

# measurement slots within one algorithm step
SLOT_PLUS, SLOT_MINUS, SLOT_APPLIED = 0, 1, 2


@dataclass
class LinearPlant:
    """``y = C x + D w[k] + y0``."""

    C: np.ndarray
    D: np.ndarray | None = None
    y0: np.ndarray | None = None
    w_trajectory: np.ndarray | None = None

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        m = self.C.shape[0]
        self.y0 = np.zeros(m) if self.y0 is None else np.asarray(self.y0, dtype=float)
        if self.y0.shape != (m,):
            raise InvalidArgument(f"y0 must have shape ({m},), got {self.y0.shape}")
        if self.D is not None:
            self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
            if self.D.shape[0] != m:
                raise InvalidArgument("D row count must match C")
            if self.w_trajectory is None:
                raise InvalidArgument("D given without a w trajectory")
            self.w_trajectory = np.atleast_2d(np.asarray(self.w_trajectory, dtype=float))
            if self.w_trajectory.shape[1] != self.D.shape[1]:
                raise InvalidArgument("w trajectory width must match D columns")

    @property
    def n_inputs(self):
        return self.C.shape[1]

    @property
    def n_outputs(self):
        return self.C.shape[0]

    def evaluate(self, x, k=0):
        return evaluate_linear(self, x, k)

    def apply(self, x, k=0):
        return self.evaluate(x, k)

    def jacobian(self, k=0):
        return self.C


def evaluate_linear(plant, x, k=0):
    y = plant.C @ np.asarray(x, dtype=float) + plant.y0
    if plant.D is not None:
        if not 0 <= k < len(plant.w_trajectory):
            raise InvalidArgument(f"step {k} outside the w trajectory (length {len(plant.w_trajectory)})")
        y = y + plant.D @ plant.w_trajectory[k]
    return y


class PowerFlowResult(NamedTuple):
    v: np.ndarray
    p0: float
    q0: float
    angle: np.ndarray
    iterations: int


@dataclass
class FeederModel:
    """Single-phase network with node 0 as the fixed-voltage slack.

    Impedances are per unit on ``s_base`` (MVA).
    """

    nodes: list
    lines: list  # (from_idx, to_idx, r_pu, x_pu)
    s_base: float = 1.0
    slack_voltage: float = 1.0
    _ybus: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.s_base <= 0:
            raise InvalidConfiguration(f"S_base must be positive, got {self.s_base}")
        nb = len(self.nodes)
        if nb < 2:
            raise InvalidConfiguration("feeder needs a slack node and at least one PQ node")
        adj = {i: [] for i in range(nb)}
        for a, b, r, x in self.lines:
            if r < 0:
                raise InvalidConfiguration(f"negative resistance on line {self.nodes[a]}-{self.nodes[b]}")
            if r == 0 and x == 0:
                raise InvalidConfiguration(f"zero impedance on line {self.nodes[a]}-{self.nodes[b]}")
            adj[a].append(b)
            adj[b].append(a)
        seen = {0}
        queue = deque([0])
        while queue:
            for nxt in adj[queue.popleft()]:
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        if len(seen) != nb:
            missing = [self.nodes[i] for i in range(nb) if i not in seen]
            raise InvalidConfiguration(f"nodes not connected to the slack: {missing}")

    @property
    def n(self):
        """Number of PQ (non-slack) nodes."""
        return len(self.nodes) - 1

    @property
    def pq_nodes(self):
        return self.nodes[1:]

    def index(self, node):
        """Index of a node among the PQ nodes (0-based)."""
        return self.nodes.index(str(node)) - 1

    @property
    def ybus(self):
        if self._ybus is None:
            nb = len(self.nodes)
            y = np.zeros((nb, nb), dtype=complex)
            for a, b, r, x in self.lines:
                ys = 1.0 / complex(r, x)
                y[a, a] += ys
                y[b, b] += ys
                y[a, b] -= ys
                y[b, a] -= ys
            self._ybus = y
        return self._ybus

    @classmethod
    def from_csv(cls, path, s_base=1.0, slack_voltage=1.0, slack=None):
        """Read a ``from,to,r_pu,x_pu`` line table.

        The slack node defaults to the ``from`` node of the first row.
        """
        path = Path(path)
        if not path.exists():
            raise InvalidConfiguration(f"feeder file not found: {path}")
        rows = []
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"from", "to", "r_pu", "x_pu"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise InvalidConfiguration(f"{path}: header must contain {sorted(need)}")
            for row in reader:
                rows.append((row["from"].strip(), row["to"].strip(), float(row["r_pu"]), float(row["x_pu"])))
        if not rows:
            raise InvalidConfiguration(f"{path}: no lines")
        slack = str(slack) if slack is not None else rows[0][0]
        nodes = [slack]
        for a, b, _, _ in rows:
            for node in (a, b):
                if node not in nodes:
                    nodes.append(node)
        pos = {name: i for i, name in enumerate(nodes)}
        lines = [(pos[a], pos[b], r, x) for a, b, r, x in rows]
        return cls(nodes, lines, float(s_base), float(slack_voltage))

    def evaluate(self, x, k=None):
        """Output map for stacked injections ``(p_1..p_n, q_1..q_n)`` -> ``(v_1..v_n, P0)``."""
        x = np.asarray(x, dtype=float)
        res = solve_power_flow(self, x[: self.n] + 1j * x[self.n :])
        return np.append(res.v, res.p0)


def _dsbus(ybus, V):
    ibus = ybus @ V
    vnorm = V / np.abs(V)
    dS_dVm = (V[:, None] * np.conj(ybus * vnorm[None, :])) + np.diag(np.conj(ibus) * vnorm)
    dS_dVa = 1j * V[:, None] * np.conj(np.diag(ibus) - ybus * V[None, :])
    return dS_dVm, dS_dVa


def solve_power_flow(feeder, injections, tol=PF_TOL, max_iter=PF_MAX_ITER):
    """Newton-Raphson power flow in polar form from a flat start.

    Parameters
    ----------
    feeder : FeederModel
    injections : array_like
        Complex per-unit injections ``p + jq`` at the ``n`` PQ nodes, or an
        ``(n, 2)`` real array of ``(p, q)`` pairs.  Loads are negative.

    Returns
    -------
    PowerFlowResult
        Voltage magnitudes at the PQ nodes, feeder-head active and reactive
        power drawn from the slack (positive = import), angles, iterations.
    """
    s = np.asarray(injections)
    if s.ndim == 2:
        s = s[:, 0] + 1j * s[:, 1]
    n = feeder.n
    if s.shape != (n,):
        raise InvalidArgument(f"expected {n} injections, got shape {s.shape}")
    ybus = feeder.ybus
    V = np.ones(n + 1, dtype=complex)
    V[0] = feeder.slack_voltage
    vm = np.abs(V)
    va = np.zeros(n + 1)
    pq = slice(1, None)
    for it in range(max_iter + 1):
        s_calc = V * np.conj(ybus @ V)
        mis = s_calc[pq] - s
        f = np.concatenate([mis.real, mis.imag])
        if np.max(np.abs(f)) < tol:
            return PowerFlowResult(vm[pq].copy(), float(s_calc[0].real), float(s_calc[0].imag), va[pq].copy(), it)
        if it == max_iter:
            break
        dS_dVm, dS_dVa = _dsbus(ybus, V)
        jac = np.block(
            [
                [dS_dVa[pq, pq].real, dS_dVm[pq, pq].real],
                [dS_dVa[pq, pq].imag, dS_dVm[pq, pq].imag],
            ]
        )
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowDivergence(f"singular power-flow Jacobian at iteration {it}", it) from exc
        va[pq] -= dx[:n]
        vm[pq] -= dx[n:]
        if not np.all(np.isfinite(vm)) or np.any(vm[pq] <= 0):
            raise PowerFlowDivergence(f"voltage collapse at iteration {it}", it)
        V = vm * np.exp(1j * va)
    raise PowerFlowDivergence(
        f"power flow did not converge in {max_iter} iterations (max mismatch {np.max(np.abs(f)):.3e} p.u.)",
        max_iter,
    )


@dataclass(frozen=True)
class NoiseModel:
    """Multiplicative Gaussian measurement noise ``y_hat = y (1 + W)``, ``W ~ N(0, sigma^2)``."""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidArgument(f"noise sigma must be non-negative, got {self.sigma}")

    def draws(self, size, step, slot):
        rng = np.random.default_rng([int(self.seed), int(step), int(slot)])
        return rng.standard_normal(size)

    def measure(self, y, step=0, slot=SLOT_APPLIED):
        return measure(y, self, step, slot)


def measure(y, noise, step=0, slot=SLOT_APPLIED):
    """Noisy measurement of ``y``; independent draws per ``(seed, step, slot)``."""
    y = np.asarray(y, dtype=float)
    if noise is None or noise.sigma == 0:
        return y.copy()
    return y * (1.0 + noise.sigma * noise.draws(y.shape, step, slot))


def numerical_jacobian(plant, x0, k=0, delta=1e-5):
    """Central-difference Jacobian of ``plant.evaluate`` (or a callable) at ``x0``."""
    f = plant.evaluate if hasattr(plant, "evaluate") else plant
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e[j] = delta
        cols.append((np.asarray(f(x0 + e, k)) - np.asarray(f(x0 - e, k))) / (2.0 * delta))
    return np.column_stack(cols)

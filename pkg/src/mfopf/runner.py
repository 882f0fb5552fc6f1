"""Scenario execution: profile ingestion, the simulation loop, sweeps and target trajectories."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .engine import saddle_point_oracle
from .errors import InvalidConfiguration, PowerFlowDivergence
from .metrics import MetricsReport, avv, nrmse, violation_episodes
from .opf import (
    Battery,
    FeederPlant,
    GatherBroadcastController,
    OpfSpec,
    Pv,
    VoltageLimits,
    block_step_sizes,
    build_problem,
    der_set,
    nominal_setpoints,
)
from .plant import FeederModel, LinearPlant, NoiseModel, numerical_jacobian
from .sets import project_primal
from .signals import assign_frequencies, make_sinusoid_bank

log = logging.getLogger(__name__)


def _read_long_csv(path, value_cols):
    series = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"t_seconds", "node", *value_cols}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise InvalidConfiguration(f"{path}: header must contain {sorted(need)}")
        for i, row in enumerate(reader, start=2):
            try:
                vals = [float(row["t_seconds"])] + [float(row[c]) for c in value_cols]
            except ValueError:
                raise InvalidConfiguration(f"{path}:{i}: non-numeric field") from None
            series.setdefault(row["node"].strip(), []).append(vals)
    out = {}
    for node, rows in series.items():
        arr = np.array(sorted(rows))
        if np.any(np.diff(arr[:, 0]) <= 0):
            raise InvalidConfiguration(f"{path}: duplicate time stamps for node {node}")
        out[node] = arr
    return out


def load_profiles(cfg, feeder):
    """Per-step load matrix (``(K, n)`` complex p.u. consumption) and PV availability (MW)."""
    t = np.asarray(cfg.times())
    loads = np.zeros((t.size, feeder.n), dtype=complex)
    for node, arr in _read_long_csv(cfg.loads_file, ("p_MW", "q_MVAr")).items():
        if node not in feeder.pq_nodes:
            raise InvalidConfiguration(f"{cfg.loads_file}: load at unknown node {node}")
        p = np.interp(t, arr[:, 0], arr[:, 1])
        q = np.interp(t, arr[:, 0], arr[:, 2])
        scale = np.ones_like(t)
        for ev in cfg.events:
            if node in ev.nodes:
                scale[(t >= ev.start) & (t < ev.end)] *= ev.scale
        loads[:, feeder.index(node)] = scale * (p + 1j * q) / cfg.s_base
    for ev in cfg.events:
        for node in ev.nodes:
            if node not in feeder.pq_nodes:
                raise InvalidConfiguration(f"event references unknown node {node}")
    pv = {node: np.maximum(np.interp(t, arr[:, 0], arr[:, 1]), 0.0)
          for node, arr in _read_long_csv(cfg.pv_file, ("p_available_MW",)).items()}
    return loads, pv


def reference_trace(cfg):
    """Feeder-head reference ``P0*`` (MW) at each step."""
    t = np.asarray(cfg.times())
    times = np.asarray(cfg.reference_times)
    vals = np.asarray(cfg.reference_mw)
    if cfg.reference_interp == "linear":
        return np.interp(t, times, vals)
    idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(vals) - 1)
    return vals[idx]


def build_fleet(cfg, pv_available):
    fleet = []
    for dev in cfg.fleet:
        if dev.kind == "battery":
            c = cfg.battery_costs
            fleet.append(Battery(
                dev.node, dev.soc, dev.soc_min, dev.soc_max, dev.p_min, dev.p_max, dev.s_rated,
                cfg.efficiency, c[0], c[1], c[2], cfg.soc_target, cfg.ref_horizon_h,
            ))
        else:
            if dev.node not in pv_available:
                raise InvalidConfiguration(f"{cfg.pv_file}: no availability profile for PV at node {dev.node}")
            c = cfg.pv_costs
            fleet.append(Pv(dev.node, dev.s_rated, pv_available[dev.node], c[0], c[1], c[2]))
    return fleet


@dataclass
class Setup:
    cfg: object
    feeder: FeederModel
    plant: object
    fleet: list
    spec: OpfSpec
    signal: object
    alpha: np.ndarray
    x0: np.ndarray
    reference_mw: np.ndarray
    hard_limits: VoltageLimits


def build_setup(cfg):
    """Fresh, independent simulation objects for one run."""
    feeder = FeederModel.from_csv(cfg.feeder_file, cfg.s_base, cfg.slack_voltage)
    loads, pv = load_profiles(cfg, feeder)
    fleet = build_fleet(cfg, pv)
    for dev in fleet:
        if dev.node not in feeder.pq_nodes:
            raise InvalidConfiguration(f"DER at unknown node {dev.node}")
    plant = FeederPlant(feeder, loads, fleet, cfg.dt / 3600.0)
    ref = reference_trace(cfg)
    hard = VoltageLimits.uniform(feeder.n, cfg.v_lower, cfg.v_upper)
    spec = OpfSpec(ref / cfg.s_base, hard.tightened(cfg.v_margin), cfg.p, cfg.d, cfg.dual_cap)
    signal = None
    if fleet:
        n = 2 * len(fleet)
        if cfg.probe_mode == "band":
            freqs = assign_frequencies(n, "band", f_min=cfg.f_min, f_max=cfg.f_max)
        else:
            freqs = assign_frequencies(n, "integer-cycles", period=cfg.probe_period)
        signal = make_sinusoid_bank(n, freqs, dt=cfg.dt)
    alpha = block_step_sizes(fleet, cfg.pv_steps, cfg.battery_steps)
    x0 = nominal_setpoints(fleet, 0)
    x0 = project_primal(x0, [(slice(2 * i, 2 * i + 2), der_set(d, 0, plant.dt_h)) for i, d in enumerate(fleet)])
    return Setup(cfg, feeder, plant, fleet, spec, signal, alpha, x0, ref, hard)


class RunResult(NamedTuple):
    report: MetricsReport
    trace: dict
    trace_path: Path | None
    metrics_path: Path | None


def _der_tag(dev):
    return f"{'bt' if dev.kind == 'battery' else 'pv'}{dev.node}"


def trace_columns(feeder, fleet):
    cols = ["step", "t_s", "P0_MW", "P0_ref_MW", "v_min", "v_max", "lam_min", "lam_max"]
    cols += [f"v_{n}" for n in feeder.pq_nodes]
    for dev in fleet:
        tag = _der_tag(dev)
        cols += [f"p_{tag}", f"q_{tag}", f"lo_{tag}", f"hi_{tag}"]
        if dev.kind == "battery":
            cols.append(f"soc_{tag}")
    return cols


def write_trace(path, cols, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([str(v) if isinstance(v, int) else repr(float(v)) for v in row])


def read_trace(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        cols = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(cols))
    return {c: data[:, i] for i, c in enumerate(cols)}


def _report(cfg, p0, ref, v, hard, runtime, controlled, halted_at=None):
    k = len(p0)
    tail = max(1, min(k, int(round(cfg.tail_s / cfg.dt)))) if k else 0
    return MetricsReport(
        nrmse=nrmse(p0, ref) if k else float("nan"),
        avv=avv(v, hard.lower, hard.upper) if k else 0.0,
        nrmse_tail=nrmse(p0[-tail:], ref[-tail:]) if k else float("nan"),
        steps=k,
        runtime_s=runtime,
        controlled=controlled,
        halted_at=halted_at,
        extra={"longest_violation_s": violation_episodes(v, hard.lower, hard.upper, cfg.dt) if k else 0.0},
    )


def metrics_from_trace(path, cfg):
    """Recompute the report metrics from a written trace CSV."""
    tr = read_trace(path)
    nodes = FeederModel.from_csv(cfg.feeder_file, cfg.s_base, cfg.slack_voltage).pq_nodes
    v = np.column_stack([tr[f"v_{n}"] for n in nodes])
    hard = VoltageLimits.uniform(len(nodes), cfg.v_lower, cfg.v_upper)
    return _report(cfg, tr["P0_MW"], tr["P0_ref_MW"], v, hard, 0.0, True)


def run_scenario(cfg, controlled=True, out_dir=None, write=True):
    """Simulate one scenario and (optionally) write ``trace.csv`` and ``metrics.json``.

    With ``controlled=False`` the DERs hold their nominal set-points (PV at
    available power, batteries idle).  A power-flow failure halts the run;
    the partial trace is written and the exception, carrying the step
    index, is re-raised.
    """
    setup = build_setup(cfg)
    feeder, plant, fleet, spec = setup.feeder, setup.plant, setup.fleet, setup.spec
    noise = NoiseModel(cfg.sigma, cfg.seed)
    ctrl = None
    if controlled:
        ctrl = GatherBroadcastController(
            plant, spec, setup.signal, setup.alpha, cfg.alpha_voltage, cfg.epsilon, noise,
            cfg.average_third, x0=setup.x0,
        )
    K = cfg.n_steps
    n = feeder.n
    rows = []
    p0 = np.zeros(K)
    v = np.zeros((K, n))
    halted = None
    start = time.perf_counter()
    try:
        for k in range(K):
            bounds = []
            for dev in fleet:
                s = der_set(dev, k, plant.dt_h)
                bounds.append((s.p_min, s.p_max, dev.soc if dev.kind == "battery" else None))
            if ctrl is not None:
                rec = ctrl.step()
                x, lam, y = rec.x, rec.lam, rec.y
            else:
                x = nominal_setpoints(fleet, k)
                y = plant.apply(x, k)
                lam = np.zeros(spec.n_constraints)
            p0[k] = y[-1] * cfg.s_base
            v[k] = y[:-1]
            row = [k, cfg.t_start + k * cfg.dt, p0[k], setup.reference_mw[k], y[:-1].min(), y[:-1].max(),
                   lam.min() if lam.size else 0.0, lam.max() if lam.size else 0.0]
            row += list(y[:-1])
            for i, (lo, hi, soc) in enumerate(bounds):
                row += [x[2 * i], x[2 * i + 1], lo, hi]
                if soc is not None:
                    row.append(soc)
            rows.append(row)
    except PowerFlowDivergence as exc:
        exc.step = k
        halted = k
        log.error("run %s halted at step %d: %s", cfg.name, k, exc)
        p0, v = p0[:k], v[:k]
        if write:
            _write_outputs(cfg, out_dir, feeder, fleet, rows,
                           _report(cfg, p0, setup.reference_mw[:k], v, setup.hard_limits,
                                   time.perf_counter() - start, controlled, halted))
        raise
    runtime = time.perf_counter() - start
    report = _report(cfg, p0, setup.reference_mw[:K], v, setup.hard_limits, runtime, controlled)
    trace = {c: np.array([r[i] for r in rows], dtype=float) for i, c in enumerate(trace_columns(feeder, fleet))}
    tpath = mpath = None
    if write:
        tpath, mpath = _write_outputs(cfg, out_dir, feeder, fleet, rows, report)
    return RunResult(report, trace, tpath, mpath)


def _write_outputs(cfg, out_dir, feeder, fleet, rows, report):
    out = Path(out_dir) if out_dir is not None else cfg.output_dir / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    tpath = out / "trace.csv"
    mpath = out / "metrics.json"
    write_trace(tpath, trace_columns(feeder, fleet), rows)
    mpath.write_text(report.to_json() + "\n")
    return tpath, mpath


class SweepRow(NamedTuple):
    sigma: float
    nrmse: float
    avv: float


def _sweep_one(args):
    cfg, sigma = args
    rep = run_scenario(cfg.with_(sigma=float(sigma)), write=False).report
    return SweepRow(float(sigma), rep.nrmse, rep.avv)


def noise_sweep(cfg, sigmas, workers=1, out_path=None):
    """One controlled run per noise level with the same seed; returns ``(sigma, NRMSE, AVV)`` rows."""
    jobs = [(cfg, s) for s in sigmas]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sigma", "nrmse", "avv"])
            for r in rows:
                w.writerow([repr(r.sigma), repr(r.nrmse), repr(r.avv)])
    return rows


def linearize(cfg, k, setup=None):
    """Output Jacobian ``C`` and offset ``y0`` at the uncontrolled operating point of step ``k``.

    ``y ~ C x + y0`` with ``x`` in MW / MVAr and ``y`` in p.u.
    """
    setup = build_setup(cfg) if setup is None else setup
    if not 0 <= k < cfg.n_steps:
        raise InvalidConfiguration(f"step {k} outside the time grid (0..{cfg.n_steps - 1})")
    x = nominal_setpoints(setup.fleet, k)
    C = numerical_jacobian(setup.plant, x, k, delta=1e-5 * cfg.s_base)
    y = setup.plant.evaluate(x, k)
    return C, y - C @ x, x


class TargetPoint(NamedTuple):
    k: int
    t: float
    x: np.ndarray
    lam: np.ndarray


def solve_target_trajectory(cfg, stride, tol=1e-8, max_iter=10**6):
    """Saddle points of the linearized OPF every ``stride`` steps.

    Uses the configured primal and dual step sizes as the oracle step.
    Batteries are held at their initial SOC, matching the uncontrolled
    operating point used for linearization.
    """
    if stride < 1:
        raise InvalidConfiguration(f"stride must be >= 1, got {stride}")
    setup = build_setup(cfg)
    problem = build_problem(setup.fleet, setup.spec, setup.plant.dt_h, setup.plant.n_outputs)
    out = []
    x_prev = lam_prev = None
    for k in range(0, cfg.n_steps, stride):
        C, y0, x_nom = linearize(cfg, k, setup)
        lin = LinearPlant(C, y0=y0)
        try:
            x, lam = saddle_point_oracle(
                problem, k, lin, tol=tol, max_iter=max_iter, C=C,
                x0=x_nom if x_prev is None else x_prev,
                alpha=setup.alpha, alpha_dual=cfg.alpha_voltage, lam0=lam_prev,
            )
        except Exception as exc:
            exc.args = (f"target oracle failed at step {k}: {exc}",)
            raise
        out.append(TargetPoint(k, cfg.t_start + k * cfg.dt, x, lam))
        x_prev, lam_prev = x, lam
    return out


def write_targets(path, points, fleet):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["step", "t_s"]
        for dev in fleet:
            tag = _der_tag(dev)
            head += [f"p_{tag}", f"q_{tag}"]
        w.writerow(head + ["lam_max", "lam_norm"])
        for pt in points:
            lam_max = float(pt.lam.max()) if pt.lam.size else 0.0
            w.writerow([pt.k, repr(pt.t)] + [repr(float(v)) for v in pt.x]
                       + [repr(lam_max), repr(float(np.linalg.norm(pt.lam)))])


def check_feasibility(trace, cfg, tol=1e-9):
    """Largest violation of DER boxes, discs, SOC bounds and dual caps in a trace.

    ``trace`` is a dict of columns (as returned by :func:`read_trace`).
    Returns a dict of non-negative violation magnitudes.
    """
    worst = {"box": 0.0, "disc": 0.0, "soc": 0.0, "dual": 0.0}
    for dev in cfg.fleet:
        tag = f"{'bt' if dev.kind == 'battery' else 'pv'}{dev.node}"
        p, q = trace[f"p_{tag}"], trace[f"q_{tag}"]
        lo, hi = trace[f"lo_{tag}"], trace[f"hi_{tag}"]
        worst["box"] = max(worst["box"], float(np.max(lo - p, initial=0.0)), float(np.max(p - hi, initial=0.0)))
        if dev.kind == "pv":
            worst["box"] = max(worst["box"], float(np.max(-p, initial=0.0)), float(np.max(p - dev.s_rated, initial=0.0)))
        else:
            worst["box"] = max(worst["box"], float(np.max(dev.p_min - p, initial=0.0)),
                               float(np.max(p - dev.p_max, initial=0.0)))
            soc = trace[f"soc_{tag}"]
            worst["soc"] = max(worst["soc"], float(np.max(dev.soc_min - soc, initial=0.0)),
                               float(np.max(soc - dev.soc_max, initial=0.0)))
        worst["disc"] = max(worst["disc"], float(np.max(np.hypot(p, q) - dev.s_rated, initial=0.0)))
    worst["dual"] = max(float(np.max(-trace["lam_min"], initial=0.0)),
                        float(np.max(trace["lam_max"] - cfg.dual_cap, initial=0.0)))
    return worst


def report_dict(report):
    return json.loads(report.to_json())

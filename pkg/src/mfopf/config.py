"""Scenario configuration: TOML schema, defaults and validation.

Paths inside a scenario file are resolved relative to the file.  All times
are seconds of day; powers are MW / MVAr unless a key says ``_pu``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import InvalidConfiguration

S_BASE_DEFAULT = 23.04
BAND_DEFAULT = (1.0 / 26.0, 1.0 / 7.1)

DATA_DIR = Path(__file__).resolve().parent / "data"
SCENARIO_DIR = DATA_DIR / "scenarios"

# per-device defaults: (c_p, c_q, c_pref), (alpha_p, alpha_q)
PV_COSTS = (1e-5, 1e-5, 1e-3)
BATTERY_COSTS = (1e-4 / 6.0, 1e-4 / 6.0, 1e-4 / 6.0)
PV_STEPS = (2.0, 2.0)
BATTERY_STEPS = (12.0, 12.0)
VOLTAGE_DUAL_STEP = 10.0


@dataclass(frozen=True)
class DeviceSpec:
    node: str
    kind: str
    s_rated: float
    p_min: float = -10.0
    p_max: float = 10.0
    soc: float = 15.0
    soc_min: float = 0.0
    soc_max: float = 30.0


@dataclass(frozen=True)
class LoadEvent:
    """Multiply the load at ``nodes`` by ``scale`` on ``[start, end)``."""

    start: float
    end: float
    nodes: tuple
    scale: float


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    path: Path | None
    feeder_file: Path
    fleet: tuple
    loads_file: Path
    pv_file: Path
    t_start: float
    t_end: float
    dt: float
    s_base: float = S_BASE_DEFAULT
    slack_voltage: float = 1.0
    reference_times: tuple = ()
    reference_mw: tuple = ()
    reference_interp: str = "previous"
    pv_costs: tuple = PV_COSTS
    battery_costs: tuple = BATTERY_COSTS
    pv_steps: tuple = PV_STEPS
    battery_steps: tuple = BATTERY_STEPS
    alpha_voltage: float = VOLTAGE_DUAL_STEP
    p: float = 1e-5
    d: float = 0.05
    dual_cap: float = 100.0
    epsilon: float = 0.001 * math.sqrt(2.0) * S_BASE_DEFAULT
    average_third: bool = False
    probe_mode: str = "band"
    f_min: float = BAND_DEFAULT[0]
    f_max: float = BAND_DEFAULT[1]
    probe_period: float | None = None
    sigma: float = 1e-3
    seed: int = 0
    v_lower: float = 0.96
    v_upper: float = 1.04
    v_margin: float = 0.0
    efficiency: float = 0.9
    soc_target: float | None = None
    ref_horizon_h: float = 1.0
    events: tuple = ()
    tail_s: float = 1800.0
    output_dir: Path = Path("runs")

    @property
    def n_steps(self):
        return int(math.floor((self.t_end - self.t_start) / self.dt + 1e-9))

    def times(self):
        return [self.t_start + k * self.dt for k in range(self.n_steps)]

    def with_(self, **changes):
        return replace(self, **changes)


def _get(table, key, kind, where, default=None, required=False):
    if key not in table:
        if required:
            raise InvalidConfiguration(f"{where}.{key}: missing required field")
        return default
    val = table[key]
    if kind is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if kind is not None and not isinstance(val, kind):
        raise InvalidConfiguration(f"{where}.{key}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def _pair(table, key, where, default):
    val = table.get(key, default)
    if isinstance(val, (int, float)):
        val = (val, val)
    if not isinstance(val, (list, tuple)) or len(val) != 2:
        raise InvalidConfiguration(f"{where}.{key}: expected a number or a [p, q] pair")
    return tuple(float(v) for v in val)


def _path(base, value, where):
    if not isinstance(value, str):
        raise InvalidConfiguration(f"{where}: expected a path string")
    p = Path(value)
    if not p.is_absolute():
        p = (base / p).resolve()
    if not p.exists():
        raise InvalidConfiguration(f"{where}: file not found: {p}")
    return p


def _num(v, where):
    if v == "" or v is None:
        return None
    try:
        return float(v)
    except ValueError:
        raise InvalidConfiguration(f"{where}: not a number: {v!r}") from None


def read_fleet(path):
    """Parse a DER table with columns ``node,kind,s_rated_MVA`` and optional battery fields."""
    devices = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"node", "kind", "s_rated_MVA"} <= set(reader.fieldnames):
            raise InvalidConfiguration(f"{path}: header must contain node, kind, s_rated_MVA")
        for i, row in enumerate(reader, start=2):
            where = f"{path}:{i}"
            kind = row["kind"].strip().lower()
            if kind not in ("battery", "pv"):
                raise InvalidConfiguration(f"{where}: unknown DER kind {row['kind']!r}")
            s = _num(row["s_rated_MVA"], where + " s_rated_MVA")
            if s is None or s < 0:
                raise InvalidConfiguration(f"{where}: s_rated_MVA must be non-negative")
            kw = {}
            if kind == "battery":
                for col, name in (("p_min_MW", "p_min"), ("p_max_MW", "p_max"), ("soc_MWh", "soc"),
                                  ("soc_min_MWh", "soc_min"), ("soc_max_MWh", "soc_max")):
                    v = _num(row.get(col), f"{where} {col}")
                    if v is not None:
                        kw[name] = v
            devices.append(DeviceSpec(row["node"].strip(), kind, s, **kw))
    return tuple(devices)


def load_scenario(path, **overrides):
    """Read and validate a scenario TOML file.

    A bare name such as ``"tracking"`` resolves to the bundled scenario of
    that name.  ``overrides`` replace fields of the resulting config.
    """
    path = Path(path)
    if not path.exists() and (SCENARIO_DIR / f"{path.name}.toml").exists():
        path = SCENARIO_DIR / f"{path.name}.toml"
    if not path.exists():
        raise InvalidConfiguration(f"scenario file not found: {path}")
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfiguration(f"{path}: {exc}") from exc
    cfg = parse_scenario(raw, path.parent.resolve(), path)
    return cfg.with_(**overrides) if overrides else cfg


def parse_scenario(raw, base, path=None):
    base = Path(base)
    sc = raw.get("scenario", {})
    net = raw.get("network", {})
    time = raw.get("time", {})
    alg = raw.get("algorithm", {})
    probe = raw.get("probe", {})
    volt = raw.get("voltage", {})
    costs = raw.get("costs", {})
    bat = raw.get("battery", {})
    ref = raw.get("reference", {})
    prof = raw.get("profiles", {})

    known = {"scenario", "network", "fleet", "profiles", "time", "reference", "algorithm", "probe",
             "noise", "voltage", "costs", "battery", "events", "metrics"}
    extra = set(raw) - known
    if extra:
        raise InvalidConfiguration(f"unknown top-level tables: {sorted(extra)}")

    s_base = _get(net, "s_base", float, "network", S_BASE_DEFAULT)
    if s_base <= 0:
        raise InvalidConfiguration("network.s_base: must be positive")
    feeder = _path(base, _get(net, "feeder", str, "network", required=True), "network.feeder")
    fleet_tab = raw.get("fleet", {})
    fleet = read_fleet(_path(base, _get(fleet_tab, "file", str, "fleet", required=True), "fleet.file")) if fleet_tab.get("file") else ()
    if fleet_tab.get("exclude"):
        fleet = tuple(d for d in fleet if d.node not in {str(n) for n in fleet_tab["exclude"]})
    loads = _path(base, _get(prof, "loads", str, "profiles", required=True), "profiles.loads")
    pv = _path(base, _get(prof, "pv", str, "profiles", required=True), "profiles.pv")

    t_start = _get(time, "t_start", float, "time", required=True)
    t_end = _get(time, "t_end", float, "time", required=True)
    dt = _get(time, "dt", float, "time", 1.0)
    if not dt > 0:
        raise InvalidConfiguration(f"time.dt: must be positive, got {dt}")
    if not t_end > t_start:
        raise InvalidConfiguration(f"time: t_end ({t_end}) must exceed t_start ({t_start})")

    times = tuple(float(v) for v in ref.get("times_s", [t_start]))
    values = tuple(float(v) for v in ref.get("p0_mw", []))
    if len(times) != len(values) or not values:
        raise InvalidConfiguration("reference: times_s and p0_mw must be non-empty and of equal length")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise InvalidConfiguration("reference.times_s: must be strictly increasing")
    if any(v == 0 for v in values):
        raise InvalidConfiguration("reference.p0_mw: zero reference makes NRMSE undefined")
    interp = _get(ref, "interpolation", str, "reference", "previous")
    if interp not in ("previous", "linear"):
        raise InvalidConfiguration(f"reference.interpolation: expected 'previous' or 'linear', got {interp!r}")

    epsilon = _get(alg, "epsilon", float, "algorithm", 0.001 * math.sqrt(2.0) * s_base)
    if not epsilon > 0:
        raise InvalidConfiguration(f"algorithm.epsilon: must be positive, got {epsilon}")
    p = _get(alg, "p", float, "algorithm", 1e-5)
    d = _get(alg, "d", float, "algorithm", 0.05)
    if p < 0 or d < 0:
        raise InvalidConfiguration("algorithm.p / algorithm.d: must be non-negative")
    pv_steps = _pair(alg, "alpha_pv", "algorithm", PV_STEPS)
    bt_steps = _pair(alg, "alpha_battery", "algorithm", BATTERY_STEPS)
    alpha_v = _get(alg, "alpha_voltage", float, "algorithm", VOLTAGE_DUAL_STEP)
    if min(pv_steps + bt_steps) <= 0 or alpha_v <= 0:
        raise InvalidConfiguration("algorithm: step sizes must be positive")

    def weights(kind, default):
        tab = costs.get(kind, {})
        out = tuple(_get(tab, k, float, f"costs.{kind}", dv) for k, dv in zip(("c_p", "c_q", "c_pref"), default))
        if min(out) < 0:
            raise InvalidConfiguration(f"costs.{kind}: weights must be non-negative")
        return out

    mode = _get(probe, "mode", str, "probe", "band")
    if mode not in ("band", "integer-cycles"):
        raise InvalidConfiguration(f"probe.mode: unknown mode {mode!r}")
    period = _get(probe, "period", float, "probe", None)
    if mode == "integer-cycles" and not (period and period > 0):
        raise InvalidConfiguration("probe.period: integer-cycles mode needs a positive period")

    lower = _get(volt, "lower", float, "voltage", 0.96)
    upper = _get(volt, "upper", float, "voltage", 1.04)
    margin = _get(volt, "margin", float, "voltage", 0.0)
    if not lower + margin < upper - margin:
        raise InvalidConfiguration("voltage: need lower + margin < upper - margin")

    sigma = _get(raw.get("noise", {}), "sigma", float, "noise", 1e-3)
    if sigma < 0:
        raise InvalidConfiguration("noise.sigma: must be non-negative")

    events = []
    for i, ev in enumerate(raw.get("events", [])):
        where = f"events[{i}]"
        start = _get(ev, "start_s", float, where, required=True)
        end = _get(ev, "end_s", float, where, math.inf)
        scale = _get(ev, "load_scale", float, where, required=True)
        nodes = tuple(str(n) for n in ev.get("nodes", []))
        if not nodes or end <= start or scale < 0:
            raise InvalidConfiguration(f"{where}: needs nodes, end_s > start_s and load_scale >= 0")
        events.append(LoadEvent(start, end, nodes, scale))

    out_dir = Path(_get(sc, "output_dir", str, "scenario", "runs"))
    if not out_dir.is_absolute():
        out_dir = Path.cwd() / out_dir

    efficiency = _get(bat, "efficiency", float, "battery", 0.9)
    if not 0 < efficiency <= 1:
        raise InvalidConfiguration("battery.efficiency: must be in (0, 1]")

    return ScenarioConfig(
        name=_get(sc, "name", str, "scenario", path.stem if path else "scenario"),
        path=path,
        feeder_file=feeder,
        fleet=fleet,
        loads_file=loads,
        pv_file=pv,
        t_start=t_start,
        t_end=t_end,
        dt=dt,
        s_base=s_base,
        slack_voltage=_get(net, "slack_voltage", float, "network", 1.0),
        reference_times=times,
        reference_mw=values,
        reference_interp=interp,
        pv_costs=weights("pv", PV_COSTS),
        battery_costs=weights("battery", BATTERY_COSTS),
        pv_steps=pv_steps,
        battery_steps=bt_steps,
        alpha_voltage=alpha_v,
        p=p,
        d=d,
        dual_cap=_get(alg, "dual_cap", float, "algorithm", 100.0),
        epsilon=epsilon,
        average_third=_get(alg, "average_third", bool, "algorithm", False),
        probe_mode=mode,
        f_min=_get(probe, "f_min", float, "probe", BAND_DEFAULT[0]),
        f_max=_get(probe, "f_max", float, "probe", BAND_DEFAULT[1]),
        probe_period=period,
        sigma=sigma,
        seed=_get(sc, "seed", int, "scenario", 0),
        v_lower=lower,
        v_upper=upper,
        v_margin=margin,
        efficiency=efficiency,
        soc_target=_get(bat, "soc_target", float, "battery", None),
        ref_horizon_h=_get(bat, "reference_horizon_h", float, "battery", 1.0),
        events=tuple(events),
        tail_s=_get(raw.get("metrics", {}), "tail_s", float, "metrics", 1800.0),
        output_dir=out_dir,
    )

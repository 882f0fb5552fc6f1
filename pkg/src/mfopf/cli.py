"""Command-line entry point: ``mfopf {run,sweep-noise,target,metrics,linearize}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import load_scenario
from .errors import MfopfError
from .runner import (
    build_setup,
    check_feasibility,
    linearize,
    metrics_from_trace,
    noise_sweep,
    read_trace,
    report_dict,
    run_scenario,
    solve_target_trajectory,
    write_targets,
)

log = logging.getLogger("mfopf")


def _out_dir(args, cfg, suffix=""):
    if args.out:
        return Path(args.out)
    return cfg.output_dir / (cfg.name + suffix)


def cmd_run(args):
    over = {}
    if args.sigma is not None:
        over["sigma"] = args.sigma
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = load_scenario(args.scenario, **over)
    out = _out_dir(args, cfg, "" if args.controlled else "-uncontrolled")
    res = run_scenario(cfg, controlled=args.controlled, out_dir=out)
    print(res.report.to_json())
    print(f"trace: {res.trace_path}", file=sys.stderr)
    return 0


def cmd_sweep(args):
    cfg = load_scenario(args.scenario)
    out = Path(args.out) if args.out else cfg.output_dir / f"{cfg.name}-sweep.csv"
    rows = noise_sweep(cfg, args.sigmas, workers=args.workers, out_path=out)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["sigma", "nrmse", "avv"])
    for r in rows:
        w.writerow([repr(r.sigma), repr(r.nrmse), repr(r.avv)])
    return 0


def cmd_target(args):
    cfg = load_scenario(args.scenario)
    pts = solve_target_trajectory(cfg, args.stride, tol=args.tol)
    fleet = build_setup(cfg).fleet
    out = Path(args.out) if args.out else cfg.output_dir / f"{cfg.name}-target.csv"
    write_targets(out, pts, fleet)
    print(f"{len(pts)} target points written to {out}")
    return 0


def cmd_metrics(args):
    cfg = load_scenario(args.scenario)
    rep = metrics_from_trace(args.trace, cfg)
    out = report_dict(rep)
    out.pop("runtime_s", None)
    out["feasibility"] = check_feasibility(read_trace(args.trace), cfg)
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_linearize(args):
    cfg = load_scenario(args.scenario)
    C, y0, x = linearize(cfg, args.at_step)
    print(json.dumps({"step": args.at_step, "x": x.tolist(), "C": C.tolist(), "y0": y0.tolist()}))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="mfopf", description="Model-free online primal-dual OPF simulator")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario and write trace.csv / metrics.json")
    p.add_argument("scenario", help="scenario TOML path or bundled name (tracking, sag, noise, day)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--uncontrolled", dest="controlled", action="store_false", help="hold DERs at nominal set-points")
    p.add_argument("--sigma", type=float, help="override the noise level")
    p.add_argument("--seed", type=int, help="override the seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-noise", help="NRMSE / AVV for a list of noise levels")
    p.add_argument("scenario")
    p.add_argument("--sigmas", type=float, nargs="+", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="sweep table CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("target", help="saddle points of the linearized OPF every N steps")
    p.add_argument("scenario")
    p.add_argument("--stride", type=int, default=600)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_target)

    p = sub.add_parser("metrics", help="recompute metrics and feasibility from a trace")
    p.add_argument("trace")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("linearize", help="output Jacobian at the uncontrolled operating point")
    p.add_argument("scenario")
    p.add_argument("--at-step", type=int, default=0)
    p.set_defaults(func=cmd_linearize)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MfopfError as exc:
        step = getattr(exc, "step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

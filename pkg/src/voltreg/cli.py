"""Command-line front end.

Exit codes: 0 success, 1 usage or I/O error, 2 load flow did not converge,
3 voltage violations remain after control.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import yaml

from . import __version__, sensmat
from .carpms import BACKENDS, ControlConfig, benchmark_backends, run_control, voltage_csv
from .loadflow import LoadFlowError, OperatingPoint, solve, to_csv_rows
from .montecarlo import CampaignSpec, compare_backends, compare_campaign, histogram_csv, run_campaign
from .netmodel import (FIXTURE_SEED, NetworkError, fixture_path, load_network, save_network,
                       synthesize_fixture)

log = logging.getLogger("voltreg")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_RESIDUAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# scenario files

def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a mapping at the top level")
    return doc


def _network_for(doc: dict, base: Path):
    """Resolve ``network:`` relative to the scenario file, falling back to bundled fixtures."""
    ref = doc.get("network")
    if not ref:
        raise UsageError("scenario has no 'network' entry")
    path = (base / ref) if not Path(ref).is_absolute() else Path(ref)
    if not path.is_file() and fixture_path(str(ref)).is_file():
        path = fixture_path(str(ref))
    if not path.is_file():
        raise UsageError(f"network file not found: {ref}")
    return load_network(path)


def _operating_point(doc: dict) -> OperatingPoint:
    op = doc.get("operating_point") or {}
    pv = op.get("pv_scale")
    return OperatingPoint(float(op.get("load_scale", 1.0)), None if pv is None else float(pv))


def load_scenario(path, backend: Optional[str] = None, seed: Optional[int] = None):
    """Read a scenario file into ``(network, operating point, control config)``."""
    path = Path(path)
    doc = _read_yaml(path)
    model = _network_for(doc, path.parent)
    return model, _operating_point(doc), ControlConfig.from_dict(doc, backend, seed)


def load_campaign(path, seed: Optional[int] = None, runs: Optional[int] = None):
    path = Path(path)
    doc = _read_yaml(path)
    model = _network_for(doc, path.parent)
    spec = CampaignSpec.from_dict(doc)
    if seed is not None:
        spec = replace(spec, seed=seed)
    if runs is not None:
        spec = replace(spec, n_runs=runs)
    return model, spec, ControlConfig.from_dict(doc)


# --------------------------------------------------------------------------
# output helpers

def _emit(out_dir: Optional[Path], name: str, text: str):
    """Write ``text`` to ``out_dir/name``, or to stdout without an output directory."""
    if out_dir is None:
        sys.stdout.write(text)
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text)


def _rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _dump(doc) -> str:
    return yaml.safe_dump(doc, sort_keys=False)


# --------------------------------------------------------------------------
# commands

def cmd_loadflow(args) -> int:
    model, op, _ = load_scenario(args.scenario)
    sol = solve(model, op)
    unit = "v_volts" if args.volts else "v_pu"
    neut = "v_neut_volts" if args.volts else "v_neut_pu"
    _emit(args.out_dir, "voltages.csv",
          _rows_to_csv(["busbar", "phase", unit, "angle_deg", neut], to_csv_rows(sol, args.volts)))
    if not sol.converged:
        print(f"load flow did not converge after {sol.iterations} iterations "
              f"(mismatch {sol.mismatch:.3g} p.u)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sensmat(args) -> int:
    model, op, cfg = load_scenario(args.scenario)
    base = solve(model, op)
    if not base.converged:
        print("base load flow did not converge", file=sys.stderr)
        return EXIT_DIVERGED
    sm = sensmat.build(model, base, cfg.transformer_method)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(sensmat.to_csv_rows(sm, model))
    _emit(args.out_dir, "sensmat.csv", buf.getvalue())
    return EXIT_OK


def cmd_control(args) -> int:
    model, op, cfg = load_scenario(args.scenario, args.backend, args.seed)
    report = run_control(model, op, cfg, scenario_id=Path(args.scenario).stem)
    out = args.out_dir or Path(".")
    _emit(out, "report.yaml", report.dumps())
    _emit(out, "voltages_before.csv", voltage_csv(report.v_before))
    _emit(out, "voltages_after.csv", voltage_csv(report.v_after, report.neutral_after))
    print(f"{report.label}: violations {report.before.total} -> {report.after.total}, "
          f"V range after [{report.v_min_after:.4f}, {report.v_max_after:.4f}] p.u, "
          f"curtailed {report.curtailed_kw:.3f} kW")
    return EXIT_OK if report.success else EXIT_RESIDUAL


def cmd_compare(args) -> int:
    path = Path(args.scenario)
    doc = _read_yaml(path)
    if "n_runs" in doc or "pv_scale" in doc:
        model, spec, cfg = load_campaign(path, args.seed, args.runs)
        shifts, res = compare_campaign(model, spec, cfg, args.jobs)
        out = {"campaign": spec.label, "n_runs": spec.n_runs,
               "counts": {be: r.counts for be, r in res.items()},
               "mean_shift": {k: {"n": s.n, "sensitivity": s.mean_sensitivity,
                                  "loadflow": s.mean_loadflow, "shift": s.shift}
                              for k, s in shifts.items()}}
    else:
        model, op, cfg = load_scenario(path, None, args.seed)
        out = compare_backends(model, op, cfg, path.stem).to_document()
    _emit(args.out_dir, "compare.yaml", _dump(out))
    return EXIT_OK


def cmd_mc(args) -> int:
    model, spec, cfg = load_campaign(args.campaign, args.seed, args.runs)
    if args.backend:
        cfg = replace(cfg, backend=args.backend)
    res = run_campaign(model, spec, cfg, args.jobs)
    out = args.out_dir or Path(".")
    _emit(out, "runs.csv", res.rows_csv())
    _emit(out, "summary.yaml", res.summary_yaml())
    _emit(out, "timing.yaml", res.timing_yaml())
    _emit(out, "hist_min_qinj.csv", histogram_csv(res.min_voltage))
    _emit(out, "hist_max_upper.csv", histogram_csv(res.max_voltage))
    c = res.counts
    print(f"{spec.label}: " + ", ".join(f"{k}={v}" for k, v in c.items()))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.n < 10:
        raise UsageError("bench needs at least 10 iterations")
    model, op, cfg = load_scenario(args.scenario)
    stats = benchmark_backends(model, op, args.n, cfg.transformer_method,
                               args.seed if args.seed is not None else 0)
    stats["ratio"] = stats["sensitivity"]["mean_ms"] / stats["loadflow"]["mean_ms"]
    _emit(args.out_dir, "bench.yaml", _dump(stats))
    return EXIT_OK


def cmd_fixture(args) -> int:
    seed = args.seed if args.seed is not None else FIXTURE_SEED
    model = synthesize_fixture(seed)
    if args.output:
        save_network(model, args.output)
    else:
        out = args.out_dir or Path(".")
        out.mkdir(parents=True, exist_ok=True)
        save_network(model, out / "lotus63.net")
    return EXIT_OK


# --------------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copies must not overwrite flags given before the subcommand
    def d(value):
        return argparse.SUPPRESS if suppress else value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(None),
                        help="seed for all randomness (overrides the file)")
    common.add_argument("--backend", choices=BACKENDS, default=d(None),
                        help="voltage backend used inside the optimizer")
    common.add_argument("--jobs", type=int, default=d(1), help="worker processes for campaigns")
    common.add_argument("--out-dir", type=Path, default=d(None),
                        help="directory for output files")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    ap = argparse.ArgumentParser(prog="voltreg", parents=[_global_flags(False)],
                                 description="LV network voltage regulation with PV inverters")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("loadflow", parents=[common], help="solve one scenario, write voltages")
    p.add_argument("scenario")
    p.add_argument("--volts", action="store_true", help="report volts instead of p.u")
    p.set_defaults(func=cmd_loadflow)

    p = sub.add_parser("sensmat", parents=[common], help="write the sensitivity matrix")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_sensmat)

    p = sub.add_parser("control", parents=[common], help="run the control sequence")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("compare", parents=[common],
                       help="run both backends on a scenario or campaign")
    p.add_argument("scenario")
    p.add_argument("--runs", type=int, default=None, help="override the campaign run count")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("mc", parents=[common], help="run a Monte Carlo campaign")
    p.add_argument("campaign")
    p.add_argument("--runs", type=int, default=None, help="override the campaign run count")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("bench", parents=[common], help="time both voltage backends")
    p.add_argument("scenario")
    p.add_argument("-n", type=int, default=1000, help="iterations (at least 10)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fixture", parents=[common], help="synthesize the test network")
    p.add_argument("-o", "--output", type=Path, default=None)
    p.set_defaults(func=cmd_fixture)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, NetworkError, OSError, ValueError) as exc:
        print(f"voltreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LoadFlowError as exc:
        print(f"voltreg: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

"""Monte Carlo campaigns over randomized PV placement, ratings and loading."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import yaml

from .carpms import LABELS, ControlConfig, ControlReport, run_control
from .loadflow import OperatingPoint
from .netmodel import PHASES, LoadPoint, NetworkModel, PvInverter

log = logging.getLogger(__name__)

# time label -> (pv_scale, load_scale, full-scale run count)
TIME_SETTINGS = {
    "10:00": (0.76, 0.30, 1000),
    "11:00": (0.93, 0.50, 2000),
    "21:00": (0.00, 1.00, 500),
}


@dataclass
class CampaignSpec:
    label: str
    pv_scale: float
    load_scale: float
    n_runs: int = 100
    seed: int = 0
    randomize_positions: bool = True
    randomize_ratings: bool = True
    randomize_loads: bool = True
    phase_bias: float = 0.5
    biased_phase: str = "c"
    load_jitter: tuple = (0.8, 1.2)
    rating_range: tuple = (2.0, 7.0)

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be at least 1")
        if not (0 <= self.pv_scale <= 1 and 0 <= self.load_scale <= 1):
            raise ValueError("scales must lie in [0, 1]")
        if not 0 <= self.phase_bias <= 1:
            raise ValueError("phase_bias must lie in [0, 1]")

    @classmethod
    def preset(cls, label: str, n_runs: Optional[int] = None, seed: int = 0, **kw) -> "CampaignSpec":
        pv, load, full = TIME_SETTINGS[label]
        return cls(label, pv, load, n_runs or full, seed, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignSpec":
        r = d.get("randomize") or {}
        return cls(label=str(d.get("label", "campaign")), pv_scale=float(d["pv_scale"]),
                   load_scale=float(d["load_scale"]), n_runs=int(d.get("n_runs", 100)),
                   seed=int(d.get("seed", 0)),
                   randomize_positions=bool(r.get("pv_positions", True)),
                   randomize_ratings=bool(r.get("ratings", True)),
                   randomize_loads=bool(r.get("loads", True)),
                   phase_bias=float(d.get("phase_bias", 0.5)),
                   biased_phase=str(d.get("biased_phase", "c")),
                   load_jitter=tuple(d.get("load_jitter", (0.8, 1.2))),
                   rating_range=tuple(d.get("rating_range", (2.0, 7.0))))


def randomize(model: NetworkModel, spec: CampaignSpec, seed: int) -> NetworkModel:
    """Draw one Monte Carlo network: PV positions/ratings and individual loads."""
    rng = np.random.default_rng(seed)
    n = model.n_busbars
    inverters = []
    for inv in model.inverters:
        bus, phase, rating = inv.busbar, inv.phase, inv.rated_apparent
        if spec.randomize_positions:
            bus = int(rng.integers(1, n))
            if rng.random() < spec.phase_bias:
                phase = spec.biased_phase
            else:
                phase = PHASES[int(rng.integers(3))]
        if spec.randomize_ratings:
            rating = float(rng.uniform(*spec.rating_range))
        inverters.append(PvInverter(inv.id, bus, phase, rating, 0.0, 0.0))
    loads = list(model.loads)
    if spec.randomize_loads:
        factors = rng.uniform(*spec.load_jitter, size=len(loads))
        loads = [LoadPoint(ld.busbar, ld.phase, ld.peak_active * f, ld.peak_reactive * f,
                           ld.customer)
                 for ld, f in zip(loads, factors)]
    return replace(model, inverters=tuple(inverters), loads=tuple(loads))


def _one_run(args) -> ControlReport:
    model, spec, k, cfg = args
    seed = spec.seed + k
    run_model = randomize(model, spec, seed)
    op = OperatingPoint(spec.load_scale, spec.pv_scale)
    cfg = replace(cfg, pso=replace(cfg.pso, rng_seed=seed))
    sid = f"{spec.label}#{k}"
    try:
        return run_control(run_model, op, cfg, scenario_id=sid)
    except Exception as exc:  # recorded per row, never aborts the campaign
        log.warning("run %s failed: %s", sid, exc)
        return _failed_report(sid, cfg, run_model, repr(exc))


def _failed_report(sid, cfg, model, message) -> ControlReport:
    from .carpms import ViolationSummary
    nan = np.full((model.n_busbars, 3), np.nan)
    empty = ViolationSummary(0, 0, [np.nan] * 3, [np.nan] * 3)
    z = np.zeros(model.n_inverters)
    return ControlReport(sid, cfg.backend, empty, empty, [], z, z, z, z, nan, nan,
                         np.full(model.n_busbars, np.nan), error=message)


@dataclass
class CampaignResult:
    spec: CampaignSpec
    reports: list
    counts: dict = field(default_factory=dict)
    min_voltage: np.ndarray = None
    max_voltage: np.ndarray = None
    timing: dict = field(default_factory=dict)

    @classmethod
    def aggregate(cls, spec: CampaignSpec, reports: list) -> "CampaignResult":
        ok = [r for r in reports if not r.error]
        counts = {lab: 0 for lab in LABELS}
        counts["failed"] = 0
        for r in reports:
            if r.error:
                counts["failed"] += 1
            else:
                counts[r.label] += 1
        qinj = [r.v_min_after for r in ok if r.label == "rpc_qinj"]
        upper = [r.v_max_after for r in ok if r.label in ("rpc_qabs", "apc")]
        timing = {}
        for key in ("sensitivity_ms", "loadflow_ms"):
            vals = np.array([r.timing[key] for r in ok if key in r.timing])
            if vals.size:
                timing[key] = {"mean": float(vals.mean()), "std": float(vals.std()),
                               "min": float(vals.min()), "max": float(vals.max()),
                               "n": int(vals.size)}
        return cls(spec, list(reports), counts, np.array(qinj), np.array(upper), timing)

    def by_label(self, label: str) -> list:
        return [r for r in self.reports if not r.error and r.label == label]

    def summary(self) -> dict:
        def stats(a):
            a = np.asarray(a, dtype=float)
            if not a.size:
                return None
            return {"mean": float(a.mean()), "std": float(a.std()),
                    "min": float(a.min()), "max": float(a.max()), "n": int(a.size)}
        per_label = {lab: stats([r.v_max_after if lab in ("rpc_qabs", "apc") else r.v_min_after
                                 for r in self.by_label(lab)])
                     for lab in ("rpc_qabs", "apc", "rpc_qinj")}
        return {"label": self.spec.label, "pv_scale": self.spec.pv_scale,
                "load_scale": self.spec.load_scale, "n_runs": self.spec.n_runs,
                "seed": self.spec.seed, "counts": dict(self.counts),
                "exhausted": sum(1 for r in self.reports if r.exhausted),
                "min_voltage_after_qinj": stats(self.min_voltage),
                "max_voltage_after_upper": stats(self.max_voltage),
                "controlled_voltage_by_label": per_label,
                "curtailed_kw_total": float(sum(r.curtailed_kw for r in self.reports if not r.error))}

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ControlReport.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.reports:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def summary_yaml(self) -> str:
        return yaml.safe_dump(self.summary(), sort_keys=False)

    def timing_yaml(self) -> str:
        """Wall-clock statistics; kept apart so the other outputs are reproducible."""
        return yaml.safe_dump(self.timing, sort_keys=False)


def histogram_csv(values, bins: int = 20, value_range: Optional[tuple] = None) -> str:
    """Bin edges and counts, one bin per row."""
    values = np.asarray(values, dtype=float)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    if values.size:
        counts, edges = np.histogram(values, bins=bins, range=value_range)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])
    return buf.getvalue()


def run_campaign(model: NetworkModel, spec: CampaignSpec, cfg: Optional[ControlConfig] = None,
                 jobs: int = 1) -> CampaignResult:
    """Run ``spec.n_runs`` randomized control sequences; run ``k`` uses seed ``spec.seed + k``."""
    cfg = cfg or ControlConfig()
    tasks = [(model, spec, k, cfg) for k in range(spec.n_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_one_run, tasks))
    else:
        reports = [_one_run(t) for t in tasks]
    return CampaignResult.aggregate(spec, reports)


@dataclass
class BackendComparison:
    sensitivity: ControlReport
    loadflow: ControlReport

    @property
    def voltage_delta(self) -> np.ndarray:
        return self.sensitivity.v_after - self.loadflow.v_after

    def to_document(self) -> dict:
        d = self.voltage_delta
        return {"label_sensitivity": self.sensitivity.label,
                "label_loadflow": self.loadflow.label,
                "v_min_after": [self.sensitivity.v_min_after, self.loadflow.v_min_after],
                "v_max_after": [self.sensitivity.v_max_after, self.loadflow.v_max_after],
                "max_abs_voltage_delta": float(np.nanmax(np.abs(d))),
                "mean_voltage_delta": float(np.nanmean(d)),
                "curtailed_kw": [self.sensitivity.curtailed_kw, self.loadflow.curtailed_kw]}


def compare_backends(model: NetworkModel, op: OperatingPoint,
                     cfg: Optional[ControlConfig] = None, scenario_id: str = "") -> BackendComparison:
    """Run the same control sequence with both voltage backends and identical seeds."""
    cfg = cfg or ControlConfig()
    reports = {}
    for be in ("sensitivity", "loadflow"):
        reports[be] = run_control(model, op, replace(cfg, backend=be), scenario_id)
    if reports["loadflow"].before.total == 0:
        raise ValueError("operating point has no voltage violations to compare")
    return BackendComparison(reports["sensitivity"], reports["loadflow"])


@dataclass
class DistributionShift:
    label: str
    n: int
    mean_sensitivity: float
    mean_loadflow: float

    @property
    def shift(self) -> float:
        return self.mean_sensitivity - self.mean_loadflow


def compare_campaign(model: NetworkModel, spec: CampaignSpec,
                     cfg: Optional[ControlConfig] = None, jobs: int = 1):
    """Run one campaign per backend and compare the controlled-voltage distributions.

    Returns ``(shifts, results)`` where ``shifts`` maps each control label
    present under both backends to the mean shift of its distribution
    (minimum voltage for Q-injection, maximum voltage otherwise), using only
    runs that both backends classified the same way.
    """
    cfg = cfg or ControlConfig()
    res = {be: run_campaign(model, spec, replace(cfg, backend=be), jobs)
           for be in ("sensitivity", "loadflow")}
    shifts = {}
    pairs = list(zip(res["sensitivity"].reports, res["loadflow"].reports))
    for lab in ("rpc_qinj", "rpc_qabs", "apc"):
        sel = [(a, b) for a, b in pairs if not a.error and not b.error
               and a.label == lab and b.label == lab]
        if not sel:
            continue
        pick = (lambda r: r.v_min_after) if lab == "rpc_qinj" else (lambda r: r.v_max_after)
        shifts[lab] = DistributionShift(lab, len(sel), float(np.mean([pick(a) for a, _ in sel])),
                                        float(np.mean([pick(b) for _, b in sel])))
    return shifts, res

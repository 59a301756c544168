"""Centralized control sequence: detect violations, pick the control mode, optimize, verify.

Upper-limit violations are first attacked with reactive absorption; when
full absorption cannot clear them the inverters slide along their
capability circle and active power is curtailed.  Lower-limit violations
are cleared with reactive injection.  Every stage runs the feasible region
search followed by the particle swarm, and the outcome is always checked
with a full load flow.

With the sensitivity backend a stage may take several rounds: after each
round the network is re-linearized at the verified result and the stage is
resumed from there, until the load flow confirms the result and the linear
estimate agrees with it.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import yaml
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import sensmat
from .loadflow import (LoadFlowError, OperatingPoint, Sweeper, VoltageSolution,
                       inverter_settings, load_injection)
from .netmodel import PHASE_INDEX, NetworkModel
from .objectives import (Mode, Weights, apc_cost_batch, capability_q, count_violations,
                         n_violations, rpc_cost_batch)
from .optimizer import FrsConfig, OptimizationTrace, PsoConfig, frs, pso

BACKENDS = ("sensitivity", "loadflow")
LABELS = ("none", "rpc_qabs", "apc", "rpc_qinj")


class ControlError(RuntimeError):
    pass


@dataclass
class ControlConfig:
    weights: Weights = field(default_factory=Weights)
    frs: FrsConfig = field(default_factory=FrsConfig)
    pso: PsoConfig = field(default_factory=PsoConfig)
    backend: str = "sensitivity"
    transformer_method: str = "constrained"
    max_rounds: int = 5
    refine_tol: float = 2e-4
    violating_phases_only: bool = True
    time_other_backend: bool = True

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be positive")

    @classmethod
    def from_dict(cls, d: Optional[dict], backend: Optional[str] = None,
                  seed: Optional[int] = None) -> "ControlConfig":
        d = d or {}
        opt = d.get("optimizer") or {}
        f = opt.get("frs") or {}
        p = opt.get("pso") or {}
        pso_cfg = PsoConfig(population=int(p.get("population", 50)),
                            iterations=int(p.get("iterations", 100)),
                            confidence_pb=float(p.get("pb", 1.5)),
                            confidence_gb=float(p.get("gb", 1.5)),
                            scatter_radius=float(p.get("scatter_radius", 0.1)),
                            inertia=float(p.get("inertia", 0.7)),
                            rng_seed=int(seed if seed is not None else p.get("seed", 0)))
        return cls(weights=Weights.from_dict(d.get("weights")),
                   frs=FrsConfig(max_steps=int(f.get("max_steps", 100))),
                   pso=pso_cfg,
                   backend=backend or d.get("backend", "sensitivity"),
                   max_rounds=int(opt.get("max_rounds", 5)))


@dataclass
class ViolationSummary:
    n_upper: int
    n_lower: int
    v_min: list
    v_max: list

    @classmethod
    def of(cls, vpu: np.ndarray, limits) -> "ViolationSummary":
        nu, nl, _ = count_violations(vpu, limits)
        return cls(nu, nl, [float(x) for x in np.nanmin(vpu, axis=0)],
                   [float(x) for x in np.nanmax(vpu, axis=0)])

    @property
    def total(self) -> int:
        return self.n_upper + self.n_lower


@dataclass
class ControlReport:
    scenario_id: str
    backend: str
    before: ViolationSummary
    after: ViolationSummary
    modes: list
    p_initial: np.ndarray
    q_initial: np.ndarray
    p_final: np.ndarray
    q_final: np.ndarray
    v_before: np.ndarray
    v_after: np.ndarray
    neutral_after: np.ndarray
    traces: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    exhausted: bool = False
    rounds: int = 0
    error: str = ""

    @property
    def curtailed_kw(self) -> float:
        return float(np.sum(self.p_initial - self.p_final))

    @property
    def success(self) -> bool:
        return not self.error and self.after.total == 0

    @property
    def v_min_after(self) -> float:
        return float(np.nanmin(self.v_after))

    @property
    def v_max_after(self) -> float:
        return float(np.nanmax(self.v_after))

    @property
    def label(self) -> str:
        return classify(self)

    def to_document(self) -> dict:
        return {
            "scenario": self.scenario_id,
            "backend": self.backend,
            "label": self.label,
            "modes": list(self.modes),
            "success": self.success,
            "exhausted": self.exhausted,
            "error": self.error,
            "rounds": self.rounds,
            "before": vars(self.before),
            "after": vars(self.after),
            "curtailed_kw": round(self.curtailed_kw, 9),
            "settings": [{"p_kw": round(float(p), 9), "q_kvar": round(float(q), 9)}
                         for p, q in zip(self.p_final, self.q_final)],
            "traces": [{"mode": t["mode"], "round": t["round"], "frs_exit": t["frs_exit"],
                        "frs_steps": t["frs_steps"],
                        "global_best_cost": [float(f"{c:.9g}") for c in t["global_best_cost"]]}
                       for t in self.traces],
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_document(), sort_keys=False, width=100)

    CSV_FIELDS = ("scenario", "backend", "label", "success", "exhausted", "n_upper_before",
                  "n_lower_before", "n_upper_after", "n_lower_after", "v_min_before",
                  "v_max_before", "v_min_after", "v_max_after", "curtailed_kw", "error")

    def csv_row(self) -> dict:
        vb = self.v_before
        return {
            "scenario": self.scenario_id, "backend": self.backend, "label": self.label,
            "success": int(self.success), "exhausted": int(self.exhausted),
            "n_upper_before": self.before.n_upper, "n_lower_before": self.before.n_lower,
            "n_upper_after": self.after.n_upper, "n_lower_after": self.after.n_lower,
            "v_min_before": f"{np.nanmin(vb):.8f}", "v_max_before": f"{np.nanmax(vb):.8f}",
            "v_min_after": f"{self.v_min_after:.8f}", "v_max_after": f"{self.v_max_after:.8f}",
            "curtailed_kw": f"{self.curtailed_kw:.6f}",
            "error": self.error,
        }


def classify(report: ControlReport) -> str:
    modes = set(report.modes)
    if not modes:
        return "none"
    if Mode.APC.value in modes:
        return "apc"
    if Mode.RPC_ABSORB.value in modes:
        return "rpc_qabs"
    return "rpc_qinj"


# --------------------------------------------------------------------------
# voltage backends

class _Evaluator:
    """Voltage evaluation for batches of inverter settings."""

    def __init__(self, model: NetworkModel, s_load: np.ndarray, sweeper: Sweeper,
                 backend: str, method: str):
        self.model = model
        self.s_load = s_load
        self.sweeper = sweeper
        self.backend = backend
        self.method = method
        self.n_bus = model.n_busbars
        self.lin_p = self.lin_q = None

    def loadflow(self, p, q):
        v, vn, ok, _, _ = self.sweeper.solve_settings(self.s_load, p, q)
        if not ok:
            raise LoadFlowError("load flow did not converge")
        return self.sweeper.v_pu(v) * np.where(self.sweeper.mask, 1.0, np.nan), \
            np.abs(vn) / self.sweeper.v_nom, v, vn

    def linearize(self, p, q):
        """Build the sensitivity matrix at settings ``p``, ``q`` (no-op for the load flow)."""
        if self.backend != "sensitivity":
            return
        vpu, npu, v, vn = self.loadflow(p[None], q[None])
        base = VoltageSolution(v[0], vn[0], self.model.v_nominal, self.sweeper.mask,
                               True, 0, 0.0, p, q)
        sm = sensmat.build(self.model, base, self.method, self.sweeper.topo)
        self.lin_p, self.lin_q = p.copy(), q.copy()
        self.base_v = vpu[0]
        self.base_n = npu[0]
        self.a_q = sm.dv_dq.transpose(1, 0, 2).reshape(self.n_bus * 3, -1)
        self.a_p = sm.dv_dp.transpose(1, 0, 2).reshape(self.n_bus * 3, -1)

    def estimate(self, p, q):
        p = np.atleast_2d(p)
        q = np.atleast_2d(q)
        dv = (q - self.lin_q) @ self.a_q.T + (p - self.lin_p) @ self.a_p.T
        v = self.base_v[None] + dv.reshape(p.shape[0], self.n_bus, 3)
        return v, np.broadcast_to(self.base_n, (p.shape[0], self.n_bus))

    def voltages(self, p, q):
        if self.backend == "sensitivity":
            return self.estimate(p, q)
        vpu, npu, _, _ = self.loadflow(np.atleast_2d(p), np.atleast_2d(q))
        return vpu, npu


# --------------------------------------------------------------------------
# control sequence

class _Sequence:
    def __init__(self, model: NetworkModel, op: OperatingPoint, cfg: ControlConfig):
        self.model = model
        self.op = op
        self.cfg = cfg
        self.limits = model.voltage_limits
        self.sweeper = Sweeper(model)
        self.s_load = load_injection(model, op.load_scale)
        self.ev = _Evaluator(model, self.s_load, self.sweeper, cfg.backend,
                             cfg.transformer_method)
        self.rating = np.array([inv.rated_apparent for inv in model.inverters])
        self.phase = np.array([PHASE_INDEX[inv.phase] for inv in model.inverters], dtype=int)
        self.traces: list = []
        self.eval_times: list = []
        self.rounds = 0

    def _violating_mask(self, vpu, kind):
        if not self.cfg.violating_phases_only:
            return np.ones(self.model.n_inverters, dtype=bool)
        lo, hi = self.limits
        with np.errstate(invalid="ignore"):
            bad = (vpu > hi) if kind == "upper" else (vpu < lo)
        phases = bad.any(axis=0)
        return phases[self.phase]

    def _count(self, v, kind):
        lo, hi = self.limits
        with np.errstate(invalid="ignore"):
            if kind == "upper":
                return int((v > hi).sum())
            return int((v < lo).sum())

    def run_stage(self, mode: Mode, p0, q0, x_start):
        """Optimize one control mode; returns (p, q, vpu_true, exhausted)."""
        cfg = self.cfg
        kind = "lower" if mode is Mode.RPC_INJECT else "upper"
        if mode is Mode.APC:
            lower, upper = np.zeros_like(p0), p0.copy()

            def settings(x):
                x = np.atleast_2d(x)
                return x, -capability_q(self.rating, x)

            def cost(x, v, vn):
                return apc_cost_batch(p0 - x, v, vn, cfg.weights, self.limits)
        else:
            qcap = capability_q(self.rating, p0)
            if mode is Mode.RPC_ABSORB:
                lower, upper = -qcap, np.zeros_like(qcap)
            else:
                lower, upper = np.zeros_like(qcap), qcap
            lower = np.minimum(lower, q0)
            upper = np.maximum(upper, q0)

            def settings(x):
                x = np.atleast_2d(x)
                return np.broadcast_to(p0, x.shape), x

            def cost(x, v, vn):
                return rpc_cost_batch(v, vn, cfg.weights, self.limits)

        def evaluate(x):
            t0 = time.perf_counter()
            p, q = settings(x)
            v, _ = self.ev.voltages(p, q)
            nv = self._count(v[0], kind)
            self.eval_times.append(time.perf_counter() - t0)
            return v[0], nv

        def swarm_cost(xs):
            p, q = settings(xs)
            v, vn = self.ev.voltages(p, q)
            return cost(xs, v, vn)

        x = np.clip(x_start, lower, upper)
        exhausted = False
        vpu_true = None
        for rnd in range(cfg.max_rounds):
            self.rounds += 1
            p, q = settings(x)
            self.ev.linearize(p[0].copy(), q[0].copy())
            vpu_now, _, _, _ = self.ev.loadflow(p, q)
            mask = self._violating_mask(vpu_now[0], kind)
            target = lower if (kind == "upper") else upper
            delta = np.where(mask, target - x, 0.0)
            x_frs, trace = frs(x, delta, evaluate, cfg.frs)
            if trace.frs_exit == "exhausted" and cfg.backend == "sensitivity":
                pf, qf = settings(x_frs)
                v_full, _, _, _ = self.ev.loadflow(pf, qf)
                if self._count(v_full[0], kind) == 0 and rnd + 1 < cfg.max_rounds:
                    # the linear estimate is least accurate far from its base;
                    # re-linearize near the end of the drive and search again
                    self.ev.linearize(pf[0].copy(), qf[0].copy())
                    x_frs, trace = frs(x, delta, evaluate, cfg.frs)
            exhausted = trace.frs_exit == "exhausted"
            if exhausted and cfg.backend == "sensitivity":
                pf, qf = settings(x_frs)
                v_full, _, _, _ = self.ev.loadflow(pf, qf)
                exhausted = self._count(v_full[0], kind) > 0
            if exhausted and mode is Mode.RPC_ABSORB:
                self._record(mode, rnd, trace)
                return x_frs, True, v_full[0] if cfg.backend == "sensitivity" else None
            pso_cfg = replace(cfg.pso, rng_seed=cfg.pso.rng_seed + 7919 * rnd
                              + 104729 * list(Mode).index(mode))
            x_best, trace = pso(x_frs, swarm_cost, lower, upper, pso_cfg, vectorized=True,
                                trace=trace)
            self._record(mode, rnd, trace)
            pb, qb = settings(x_best)
            vpu_true = self.ev.loadflow(pb, qb)[0][0]
            x = x_best
            if cfg.backend != "sensitivity":
                break
            v_est = self.ev.voltages(pb, qb)[0][0]
            err = float(np.nanmax(np.abs(v_est - vpu_true)))
            if n_violations(vpu_true, self.limits) == 0 and err <= cfg.refine_tol:
                break
            if exhausted and err <= cfg.refine_tol:
                break
        if (cfg.backend == "sensitivity" and not exhausted and vpu_true is not None
                and self._count(vpu_true, kind)):
            # linearization residue left a marginal violation: finish the drive
            # from the current point with verified load flows
            def verified(xv):
                p, q = settings(xv)
                v = self.ev.loadflow(p, q)[0][0]
                return v, self._count(v, kind)

            mask = self._violating_mask(vpu_true, kind)
            target = lower if (kind == "upper") else upper
            x, trace = frs(x, np.where(mask, target - x, 0.0), verified, cfg.frs)
            self._record(mode, cfg.max_rounds, trace)
            vpu_true, nv = verified(x)
            exhausted = nv > 0
        return x, exhausted, vpu_true

    def _record(self, mode, rnd, trace: OptimizationTrace):
        self.traces.append({"mode": mode.value, "round": rnd, "frs_exit": trace.frs_exit,
                            "frs_steps": trace.frs_steps_used, "frs_alpha": trace.frs_alpha,
                            "global_best_cost": list(trace.global_best_cost),
                            "wall_time": dict(trace.wall_time),
                            "evaluations": trace.evaluations})


def run_control(model: NetworkModel, op: OperatingPoint, cfg: Optional[ControlConfig] = None,
                scenario_id: str = "") -> ControlReport:
    """Detect and correct voltage violations at ``op``; the result is load-flow verified."""
    cfg = cfg or ControlConfig()
    seq = _Sequence(model, op, cfg)
    p0, q0 = inverter_settings(model, op)
    t_start = time.perf_counter()
    vpu0, npu0, _, _ = seq.ev.loadflow(p0[None], q0[None])
    vpu0 = vpu0[0]
    limits = model.voltage_limits
    before = ViolationSummary.of(vpu0, limits)
    modes: list = []
    p, q = p0.copy(), q0.copy()
    exhausted = False

    if before.total and model.n_inverters:
        lo, hi = limits
        upper_exc = float(np.nanmax(vpu0)) - hi
        lower_exc = lo - float(np.nanmin(vpu0))
        if before.n_upper and (not before.n_lower or upper_exc >= lower_exc):
            modes.append(Mode.RPC_ABSORB.value)
            x, exhausted, _ = seq.run_stage(Mode.RPC_ABSORB, p0, q0, q0)
            q = x.copy()
            if exhausted:
                modes.append(Mode.APC.value)
                x, exhausted, _ = seq.run_stage(Mode.APC, p0, q, p0)
                p = x.copy()
                q = -capability_q(seq.rating, p)
        else:
            modes.append(Mode.RPC_INJECT.value)
            x, exhausted, _ = seq.run_stage(Mode.RPC_INJECT, p0, q0, q0)
            q = x.copy()
    elif before.total:
        exhausted = True

    vpu1, npu1, _, _ = seq.ev.loadflow(p[None], q[None])
    after = ViolationSummary.of(vpu1[0], limits)
    timing = _timing(seq, p, q, cfg)
    timing["total_s"] = time.perf_counter() - t_start
    return ControlReport(scenario_id, cfg.backend, before, after, modes, p0, q0, p, q,
                         vpu0, vpu1[0], npu1[0], seq.traces, timing, exhausted, seq.rounds)


def _timing(seq: _Sequence, p, q, cfg: ControlConfig) -> dict:
    """Per-evaluation wall time (ms) of each backend: voltages plus violation check."""
    out = {}
    if seq.eval_times:
        out[f"{cfg.backend}_ms"] = 1e3 * float(np.mean(seq.eval_times))
    if not cfg.time_other_backend:
        return out
    limits = seq.limits
    if "loadflow_ms" not in out:
        t0 = time.perf_counter()
        v, _, _, _ = seq.ev.loadflow(p[None], q[None])
        n_violations(v[0], limits)
        out["loadflow_ms"] = 1e3 * (time.perf_counter() - t0)
    if "sensitivity_ms" not in out and seq.model.n_inverters:
        ev = _Evaluator(seq.model, seq.s_load, seq.sweeper, "sensitivity", cfg.transformer_method)
        ev.linearize(p.copy(), q.copy())
        t0 = time.perf_counter()
        v, _ = ev.estimate(p, q)
        n_violations(v[0], limits)
        out["sensitivity_ms"] = 1e3 * (time.perf_counter() - t0)
    return out


def controlled_point(report: ControlReport, model: NetworkModel,
                     op: OperatingPoint) -> OperatingPoint:
    """The operating point with the report's final inverter settings applied."""
    return op.with_settings(model, report.p_final, report.q_final)


def voltage_csv(vpu: np.ndarray, neutrals: Optional[np.ndarray] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["busbar", "phase", "v_pu"] + (["v_neut_pu"] if neutrals is not None else []))
    for b in range(vpu.shape[0]):
        for k, ph in enumerate("abc"):
            if np.isnan(vpu[b, k]):
                continue
            row = [b, ph, f"{vpu[b, k]:.8f}"]
            if neutrals is not None:
                row.append(f"{neutrals[b]:.8f}")
            w.writerow(row)
    return buf.getvalue()


class VoltageController(BaseEstimator):
    """Estimator-style front end to the control sequence.

    ``fit`` binds a network; ``predict`` returns the control-instance label
    of each operating point, ``transform`` the controlled operating points,
    and ``run`` the full report for one point.
    """

    def __init__(self, backend="sensitivity", c_d=1.0, c_neut=1.0, c_vial=1.0,
                 frs_steps=100, population=50, iterations=100, pb=1.5, gb=1.5,
                 scatter_radius=0.1, inertia=0.7, seed=0, max_rounds=5,
                 transformer_method="constrained"):
        self.backend = backend
        self.c_d = c_d
        self.c_neut = c_neut
        self.c_vial = c_vial
        self.frs_steps = frs_steps
        self.population = population
        self.iterations = iterations
        self.pb = pb
        self.gb = gb
        self.scatter_radius = scatter_radius
        self.inertia = inertia
        self.seed = seed
        self.max_rounds = max_rounds
        self.transformer_method = transformer_method

    def config(self) -> ControlConfig:
        return ControlConfig(
            weights=Weights(self.c_d, self.c_neut, self.c_vial),
            frs=FrsConfig(self.frs_steps),
            pso=PsoConfig(self.population, self.iterations, self.pb, self.gb,
                          self.scatter_radius, self.inertia, rng_seed=self.seed),
            backend=self.backend, transformer_method=self.transformer_method,
            max_rounds=self.max_rounds)

    def fit(self, X, y=None):
        if not isinstance(X, NetworkModel):
            raise TypeError("fit expects a NetworkModel")
        self.network_ = X
        self.config_ = self.config()
        return self

    def run(self, op: OperatingPoint, scenario_id: str = "") -> ControlReport:
        check_is_fitted(self, "network_")
        return run_control(self.network_, op, self.config_, scenario_id)

    def predict(self, X):
        return np.array([self.run(op).label for op in X])

    def transform(self, X):
        out = []
        for op in X:
            out.append(controlled_point(self.run(op), self.network_, op))
        return out


def benchmark_backends(model: NetworkModel, op: OperatingPoint, n: int = 1000,
                       transformer_method: str = "constrained", seed: int = 0) -> dict:
    """Paired per-evaluation wall times (ms) of the two voltage backends.

    Each iteration draws a small random change of the inverter reactive
    settings, then evaluates the voltages with a full load flow and with the
    sensitivity matrix (built once at ``op``), each followed by the
    violation count the optimizer needs.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    sweeper = Sweeper(model)
    s_load = load_injection(model, op.load_scale)
    p0, q0 = inverter_settings(model, op)
    lf = _Evaluator(model, s_load, sweeper, "loadflow", transformer_method)
    sv = _Evaluator(model, s_load, sweeper, "sensitivity", transformer_method)
    sv.linearize(p0, q0)
    limits = model.voltage_limits
    head = capability_q(np.array([i.rated_apparent for i in model.inverters]), p0) - np.abs(q0)
    times = {"sensitivity": np.empty(n), "loadflow": np.empty(n)}
    for k in range(n):
        q = q0 + rng.uniform(-1.0, 1.0, size=q0.shape) * np.minimum(head, 0.1)
        t0 = time.perf_counter()
        v, _ = sv.estimate(p0, q)
        n_violations(v[0], limits)
        t1 = time.perf_counter()
        v, _, _, _ = lf.loadflow(p0[None], q[None])
        n_violations(v[0], limits)
        t2 = time.perf_counter()
        times["sensitivity"][k] = t1 - t0
        times["loadflow"][k] = t2 - t1
    return {be: {"mean_ms": 1e3 * float(t.mean()), "std_ms": 1e3 * float(t.std()),
                 "min_ms": 1e3 * float(t.min()), "max_ms": 1e3 * float(t.max()), "n": n}
            for be, t in times.items()}

"""Unbalanced three-phase four-wire backward/forward sweep load flow.

Busbar voltages are phase-to-ground phasors.  Loads and inverters are
connected phase-to-neutral and behave as constant-power injections; the
neutral conductor is grounded only at the transformer star point, so the
neutral voltage at a busbar is the accumulated neutral-conductor drop.

The sweep is written in matrix form: the backward sweep aggregates the
downstream current of every line through the root-to-bus path incidence,
and the forward sweep subtracts the accumulated line drops from the
transformer secondary voltage.  Several injection patterns can be solved
at once (``solve_batch``), which the optimizer uses to evaluate a whole
swarm with one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .netmodel import PHASE_INDEX, PHASES, NetworkModel, Topology

TOLERANCE = 1e-6
MAX_ITERATIONS = 100


class LoadFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class OperatingPoint:
    """Loading and PV output at one control instant.

    ``pv_scale`` of ``None`` keeps the inverter settings stored in the
    network; otherwise every inverter produces ``pv_scale * rating`` kW at
    zero reactive power.  ``overrides`` maps inverter id to an explicit
    ``(P kW, Q kVar)`` pair and wins over both.
    """

    load_scale: float = 1.0
    pv_scale: Optional[float] = None
    overrides: Mapping[int, tuple] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.load_scale <= 1.0:
            raise ValueError("load_scale must lie in [0, 1]")
        if self.pv_scale is not None and not 0.0 <= self.pv_scale <= 1.0:
            raise ValueError("pv_scale must lie in [0, 1]")

    def with_settings(self, model: NetworkModel, p_kw, q_kvar) -> "OperatingPoint":
        ov = {inv.id: (float(p), float(q)) for inv, p, q in zip(model.inverters, p_kw, q_kvar)}
        return OperatingPoint(self.load_scale, self.pv_scale, ov)


def inverter_settings(model: NetworkModel, op: OperatingPoint) -> tuple[np.ndarray, np.ndarray]:
    """Active (kW) and reactive (kVar) setting of every inverter at ``op``."""
    p = np.empty(model.n_inverters)
    q = np.empty(model.n_inverters)
    for j, inv in enumerate(model.inverters):
        if inv.id in op.overrides:
            p[j], q[j] = op.overrides[inv.id]
        elif op.pv_scale is None:
            p[j], q[j] = inv.current_active, inv.current_reactive
        else:
            p[j], q[j] = op.pv_scale * inv.rated_apparent, 0.0
        s = inv.rated_apparent
        if p[j] < 0 or p[j] ** 2 + q[j] ** 2 > s * s * (1 + 1e-9) + 1e-12:
            raise ValueError(f"inverter {inv.id} setting ({p[j]}, {q[j]}) outside its capability")
    return p, q


def load_injection(model: NetworkModel, load_scale: float) -> np.ndarray:
    """Complex load demand per busbar and phase in VA, shape (n_bus, 3)."""
    s = np.zeros((model.n_busbars, 3), dtype=complex)
    for ld in model.loads:
        share = 1.0 / len(ld.phase)
        for ph in ld.phase:
            s[ld.busbar, PHASE_INDEX[ph]] += share * 1e3 * complex(ld.peak_active, ld.peak_reactive)
    return s * load_scale


def inverter_incidence(model: NetworkModel) -> np.ndarray:
    """(n_bus * 3, M) 0/1 matrix placing each inverter on its busbar-phase slot."""
    a = np.zeros((model.n_busbars * 3, model.n_inverters))
    for j, inv in enumerate(model.inverters):
        a[inv.busbar * 3 + PHASE_INDEX[inv.phase], j] = 1.0
    return a


@dataclass(frozen=True)
class VoltageSolution:
    v: np.ndarray            # (n_bus, 3) complex phase-to-ground volts
    v_neutral: np.ndarray    # (n_bus,) complex neutral-to-ground volts
    v_nominal: float
    energized: np.ndarray
    converged: bool
    iterations: int
    mismatch: float
    p_kw: np.ndarray = None
    q_kvar: np.ndarray = None

    @property
    def v_pu(self) -> np.ndarray:
        out = np.abs(self.v) / self.v_nominal
        return np.where(self.energized, out, np.nan)

    @property
    def neutral_pu(self) -> np.ndarray:
        return np.abs(self.v_neutral) / self.v_nominal

    @property
    def angle_deg(self) -> np.ndarray:
        return np.degrees(np.angle(self.v))

    @property
    def v_secondary(self) -> np.ndarray:
        return self.v[0]


# --------------------------------------------------------------------------
# transformer

def stiff_primary(model: NetworkModel) -> np.ndarray:
    """Primary phase voltages at 1.0 p.u, rotated so winding a-b sits at 0 degrees."""
    mag = model.transformer.primary_voltage / math.sqrt(3.0)
    ang = np.radians([-30.0, -150.0, 90.0])
    return mag * np.exp(1j * ang)


def _winding_voltages(primary_voltages) -> np.ndarray:
    vp = np.asarray(primary_voltages, dtype=complex)
    return vp - np.roll(vp, -1, axis=-1)


def transformer_secondary(model: NetworkModel, primary_voltages, secondary_currents,
                          neutral_voltage: complex = 0.0):
    """Secondary phase voltages of the delta-wye transformer.

    Solves ``I = Y1 (Vp_a - Vp_b) + Y2 V_N - Y2 V_a`` (and its cyclic
    permutations) for ``V``.  Returns ``(v_secondary, neutral_voltage)``;
    the star point is solidly grounded unless a neutral voltage is given.
    """
    tr = model.transformer
    y1, y2 = tr.y_primary, tr.y_secondary
    if y2 == 0 or y1 == 0 or not np.isfinite(y1) or not np.isfinite(y2):
        raise LoadFlowError("singular transformer admittance")
    src = y1 * _winding_voltages(primary_voltages) + y2 * neutral_voltage
    v = (src - np.asarray(secondary_currents, dtype=complex)) / y2
    return v, complex(neutral_voltage)


def transformer_power(model: NetworkModel, primary_voltages, secondary_voltages,
                      neutral_voltage: complex = 0.0) -> np.ndarray:
    """``P_s - jQ_s`` delivered by each secondary phase, from the winding equations."""
    tr = model.transformer
    vs = np.asarray(secondary_voltages, dtype=complex)
    src = tr.y_primary * _winding_voltages(primary_voltages) + tr.y_secondary * neutral_voltage
    mag, ang = np.abs(vs), np.angle(vs)
    return src * mag * np.exp(-1j * ang) - mag ** 2 * tr.y_secondary


# --------------------------------------------------------------------------
# sweep

class Sweeper:
    """Precomputed arrays for repeated sweeps on one network."""

    def __init__(self, model: NetworkModel, tol: float = TOLERANCE,
                 max_iter: int = MAX_ITERATIONS):
        self.model = model
        self.topo = Topology.from_model(model)
        self.tol = tol
        self.max_iter = max_iter
        self.v_nom = model.v_nominal
        self.e_open, _ = transformer_secondary(model, stiff_primary(model), np.zeros(3))
        self.y2 = model.transformer.y_secondary
        self.incidence = inverter_incidence(model)
        t = self.topo
        # path incidence weighted by impedance: drop at bus b = sum_k path[b,k] z_k J_k
        self.zpath = t.path * t.z_phase[None, :]
        self.znpath = t.path * t.z_neutral[None, :]
        # common-path impedance: drop at bus b = sum_c zbus[b, c] I_c
        self.zbus = self.zpath @ t.path.T
        self.znbus = self.znpath @ t.path.T
        self.mask = t.energized

    def net_demand(self, s_load: np.ndarray, p_kw: np.ndarray, q_kvar: np.ndarray) -> np.ndarray:
        """Load minus PV in VA, shape (B, n_bus, 3) for settings of shape (B, M)."""
        p_kw = np.atleast_2d(p_kw)
        q_kvar = np.atleast_2d(q_kvar)
        pv = (p_kw + 1j * q_kvar) @ self.incidence.T * 1e3
        return s_load[None] - pv.reshape(pv.shape[0], -1, 3)

    def sweep(self, s_net: np.ndarray):
        """Run the backward/forward sweep for demands ``s_net`` of shape (B, n, 3)."""
        s_net = np.where(self.mask[None], s_net, 0.0)
        batch, n = s_net.shape[0], s_net.shape[1]
        v = np.broadcast_to(self.e_open, (batch, n, 3)).astype(complex)
        vn = np.zeros((batch, n), dtype=complex)
        mismatch = np.inf
        it = 0
        converged = False
        while it < self.max_iter:
            it += 1
            i_draw = np.conj(s_net / (v - vn[..., None]))
            v0 = self.e_open - i_draw.sum(axis=1) / self.y2
            v_new = v0[:, None, :] - np.matmul(self.zbus, i_draw)
            vn_new = i_draw.sum(axis=2) @ self.znbus.T
            mismatch = max(np.abs(v_new - v).max(), np.abs(vn_new - vn).max()) / self.v_nom
            v, vn = v_new, vn_new
            if mismatch <= self.tol:
                converged = True
                break
        return v, vn, converged, it, float(mismatch)

    def solve_settings(self, s_load: np.ndarray, p_kw, q_kvar):
        return self.sweep(self.net_demand(s_load, p_kw, q_kvar))

    def v_pu(self, v: np.ndarray) -> np.ndarray:
        return np.abs(v) / self.v_nom


def solve(model: NetworkModel, op: OperatingPoint, tol: float = TOLERANCE,
          max_iter: int = MAX_ITERATIONS, sweeper: Optional[Sweeper] = None) -> VoltageSolution:
    """Solve the network at ``op``.

    Non-convergence is reported through ``converged=False`` rather than an
    exception; callers must check the flag.
    """
    sw = sweeper if sweeper is not None else Sweeper(model, tol, max_iter)
    p, q = inverter_settings(model, op)
    s_load = load_injection(model, op.load_scale)
    v, vn, ok, it, mis = sw.solve_settings(s_load, p[None], q[None])
    return VoltageSolution(v[0], vn[0], model.v_nominal, sw.mask, ok, it, mis, p, q)


def kcl_residual(model: NetworkModel, op: OperatingPoint, sol: VoltageSolution) -> float:
    """Largest per-unit current mismatch between line flows and bus demands."""
    topo = Topology.from_model(model)
    p, q = inverter_settings(model, op)
    sw = Sweeper(model)
    s_net = sw.net_demand(load_injection(model, op.load_scale), p[None], q[None])[0]
    s_net = np.where(topo.energized, s_net, 0.0)
    i_draw = np.conj(s_net / (sol.v - sol.v_neutral[:, None]))
    # line currents recovered from the voltage drops of each line
    n = model.n_busbars
    j = np.zeros((n - 1, 3), dtype=complex)
    for b in range(1, n):
        j[b - 1] = (sol.v[topo.parent[b]] - sol.v[b]) / topo.z_phase[b - 1]
    worst = 0.0
    i_base = model.transformer.rating * 1e3 / (3 * model.v_nominal)
    for b in range(1, n):
        out = j[b - 1].copy()
        kids = np.where(topo.parent == b)[0]
        for c in kids:
            out -= j[c - 1]
        worst = max(worst, np.abs(out - i_draw[b]).max() / i_base)
    return worst


def to_csv_rows(sol: VoltageSolution, volts: bool = False):
    """Rows of (busbar, phase, |V|, angle, V_neut) ready for csv.writer."""
    scale = sol.v_nominal if volts else 1.0
    vpu, ang, vn = sol.v_pu, sol.angle_deg, sol.neutral_pu
    for b in range(vpu.shape[0]):
        for k, ph in enumerate(PHASES):
            if not sol.energized[b, k]:
                continue
            yield (b, ph, f"{vpu[b, k] * scale:.8f}", f"{ang[b, k]:.6f}", f"{vn[b] * scale:.8f}")

"""PV-power-to-voltage sensitivity matrix.

For an inverter at busbar ``n`` and a target busbar ``r`` on the same phase,
the voltage sensitivity is the transformer-end term plus the sum of
``X_h / |V_h|`` (reactive) or ``R_h / |V_h|`` (active) over the lines the
two root paths share, with ``|V_h|`` the sending-end voltage of line ``h``
at the linearization point.  Once built, voltage changes for candidate
inverter settings are a matrix-vector product.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .loadflow import (OperatingPoint, VoltageSolution, solve, stiff_primary,
                       _winding_voltages)
from .netmodel import PHASE_INDEX, NetworkModel, Topology

LINEARIZATION_RADIUS = 5.0
MIN_BASE_PU = 0.5


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class SensitivityMatrix:
    """Per-phase voltage sensitivities around one base solution.

    ``line_dq`` / ``line_dp`` hold the line-drop part, shape (3, n_bus, M),
    in p.u per kVar and p.u per kW.  ``tr_dq`` / ``tr_dp`` are the
    transformer-end terms per phase.  Rows of phases other than the
    inverter's own phase are zero.
    """

    line_dq: np.ndarray
    line_dp: np.ndarray
    tr_dq: np.ndarray
    tr_dp: np.ndarray
    inverter_phase: np.ndarray
    base: VoltageSolution

    @property
    def n_inverters(self) -> int:
        return self.line_dq.shape[2]

    @cached_property
    def dv_dq(self) -> np.ndarray:
        return self.line_dq + self._transformer_block(self.tr_dq)

    @cached_property
    def dv_dp(self) -> np.ndarray:
        return self.line_dp + self._transformer_block(self.tr_dp)

    def _transformer_block(self, per_phase: np.ndarray) -> np.ndarray:
        out = np.zeros_like(self.line_dq)
        for j, ph in enumerate(self.inverter_phase):
            out[ph, :, j] = per_phase[ph]
        return out * self.base.energized.T[:, :, None]

    def matrix(self, phase: int) -> np.ndarray:
        """The combined ``[dV/dQ  dV/dP]`` block of one phase, shape (n_bus, 2M)."""
        return np.hstack([self.dv_dq[phase], self.dv_dp[phase]])


def transformer_sensitivity(model: NetworkModel, base: VoltageSolution,
                            method: str = "constrained") -> tuple[np.ndarray, np.ndarray]:
    """Sensitivity of each secondary phase voltage magnitude to PV power on that phase.

    Returns ``(dV/dQ_pv, dV/dP_pv)`` per phase in p.u per kVar / kW.

    The secondary winding delivers ``P - jQ = A |V| e^{-j delta} - |V|^2 Y2``
    with ``A = Y1 (Vp_a - Vp_b) + Y2 V_N``.  ``method="partial"`` takes the
    reciprocal of ``dQ/d|V|`` (resp. ``dP/d|V|``) with the phase angle held
    fixed.  ``method="constrained"`` lets the angle move so that the other
    power component stays constant, which is the exact small-signal
    reciprocal and agrees with finite differences of the winding equations.
    """
    if not base.converged:
        raise SensitivityError("base load flow did not converge")
    tr = model.transformer
    vs = base.v[0]
    a = tr.y_primary * _winding_voltages(stiff_primary(model)) + tr.y_secondary * base.v_neutral[0]
    mag, delta = np.abs(vs), np.angle(vs)
    rot = a * np.exp(-1j * delta)
    y2 = tr.y_secondary
    dq_dv = 2 * mag * y2.imag - rot.imag
    dp_dv = rot.real - 2 * mag * y2.real
    if method == "partial":
        if np.any(np.abs(dq_dv) < 1e-12) or np.any(np.abs(dp_dv) < 1e-12):
            raise SensitivityError("singular transformer-end sensitivity")
        dv_dqs, dv_dps = 1.0 / dq_dv, 1.0 / dp_dv
    elif method == "constrained":
        dp_dd = mag * rot.imag
        dq_dd = mag * rot.real
        det = dp_dv * dq_dd - dp_dd * dq_dv
        if np.any(np.abs(det) < 1e-12):
            raise SensitivityError("singular transformer-end sensitivity")
        dv_dqs = -dp_dd / det
        dv_dps = dq_dd / det
    else:
        raise ValueError(f"unknown method {method!r}")
    # PV output relieves the transformer one-for-one (losses neglected)
    scale = 1e3 / base.v_nominal
    return -dv_dqs * scale, -dv_dps * scale


def build(model: NetworkModel, base: VoltageSolution, method: str = "constrained",
          topology: Optional[Topology] = None) -> SensitivityMatrix:
    """Linearize the network around ``base``."""
    if not base.converged:
        raise SensitivityError("base load flow did not converge")
    vpu = base.v_pu
    if np.nanmin(vpu) < MIN_BASE_PU:
        raise SensitivityError("base voltage below 0.5 p.u; linearization refused")
    topo = topology if topology is not None else Topology.from_model(model)
    n = model.n_busbars
    m = model.n_inverters
    tr_dq, tr_dp = transformer_sensitivity(model, base, method)

    # sending-end voltage magnitude of line k (feeding busbar k + 1)
    send = np.abs(base.v[topo.parent[1:]])                      # (n-1, 3)
    x = topo.z_phase.imag[:, None] / send                       # ohm / volt
    r = topo.z_phase.real[:, None] / send
    scale = 1e3 / model.v_nominal
    inv_bus = np.array([inv.busbar for inv in model.inverters], dtype=int)
    inv_ph = np.array([PHASE_INDEX[inv.phase] for inv in model.inverters], dtype=int)
    line_dq = np.zeros((3, n, m))
    line_dp = np.zeros((3, n, m))
    if m:
        p_inv = topo.path[inv_bus]                               # (M, n-1)
        for ph in range(3):
            cols = inv_ph == ph
            if not cols.any():
                continue
            line_dq[ph][:, cols] = topo.path @ (x[:, ph, None] * p_inv[cols].T) * scale
            line_dp[ph][:, cols] = topo.path @ (r[:, ph, None] * p_inv[cols].T) * scale
    line_dq *= base.energized.T[:, :, None]
    line_dp *= base.energized.T[:, :, None]
    return SensitivityMatrix(line_dq, line_dp, tr_dq, tr_dp, inv_ph, base)


def estimate_delta_v(sm: SensitivityMatrix, dq, dp,
                     radius: Optional[float] = LINEARIZATION_RADIUS) -> np.ndarray:
    """Voltage change (p.u) at every busbar and phase for inverter changes ``dq``, ``dp``.

    Accepts single vectors of length M (returns (n_bus, 3)) or batches of
    shape (B, M) (returns (B, n_bus, 3)).  ``radius=None`` disables the
    per-element linearization guard.
    """
    dq = np.asarray(dq, dtype=float)
    dp = np.asarray(dp, dtype=float)
    m = sm.n_inverters
    if dq.shape[-1:] != (m,) or dp.shape != dq.shape:
        raise ValueError(f"expected vectors of length {m}, got {dq.shape} and {dp.shape}")
    if radius is not None and (np.abs(dq).max(initial=0) > radius
                               or np.abs(dp).max(initial=0) > radius):
        raise SensitivityError(f"step exceeds the linearization radius of {radius}")
    out = np.einsum("pnm,...m->...np", sm.dv_dq, dq) + np.einsum("pnm,...m->...np", sm.dv_dp, dp)
    return out


def to_csv_rows(sm: SensitivityMatrix, model: NetworkModel):
    """Header plus one row per energized busbar-phase: dV/dQ columns then dV/dP columns."""
    ids = [inv.id for inv in model.inverters]
    yield ["busbar", "phase"] + [f"dQ_{i}" for i in ids] + [f"dP_{i}" for i in ids]
    dq, dp = sm.dv_dq, sm.dv_dp
    for b in range(dq.shape[1]):
        for ph, name in enumerate("abc"):
            if not sm.base.energized[b, ph]:
                continue
            yield [b, name] + [f"{v:.10e}" for v in dq[ph, b]] + [f"{v:.10e}" for v in dp[ph, b]]


class SensitivityEstimator(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` linearizes a network, ``predict`` maps power
    changes to voltage changes.

    ``predict`` takes rows ``[dQ_1..dQ_M, dP_1..dP_M]`` (kVar, kW) and returns
    rows of busbar-phase voltage changes in p.u, ordered busbar-major
    (``b0a, b0b, b0c, b1a, ...``).
    """

    def __init__(self, transformer_method="constrained", radius=LINEARIZATION_RADIUS):
        self.transformer_method = transformer_method
        self.radius = radius

    def fit(self, X, y=None):
        """Linearize ``X`` (a NetworkModel) at operating point ``y`` (default: stored settings)."""
        if not isinstance(X, NetworkModel):
            raise TypeError("fit expects a NetworkModel")
        op = y if y is not None else OperatingPoint(1.0, None)
        base = solve(X, op)
        self.matrix_ = build(X, base, self.transformer_method)
        self.n_features_in_ = 2 * X.n_inverters
        self.base_voltage_ = base.v_pu
        return self

    def predict(self, X):
        check_is_fitted(self, "matrix_")
        X = check_array(X, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        m = self.n_features_in_ // 2
        dv = estimate_delta_v(self.matrix_, X[:, :m], X[:, m:], self.radius)
        return dv.reshape(X.shape[0], -1)

"""Cost functions, violation counting and inverter capability geometry.

Voltage arguments are per-unit magnitudes shaped ``(..., n_bus, 3)``
(``nan`` marks phases a busbar does not serve); neutral voltages are
shaped ``(..., n_bus)``.  Leading batch dimensions are supported so a
whole swarm can be scored at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .netmodel import PvInverter


class Mode(str, Enum):
    RPC_ABSORB = "RPC-absorb"
    RPC_INJECT = "RPC-inject"
    APC = "APC"


@dataclass(frozen=True)
class Weights:
    c_d: float = 1.0
    c_neut: float = 1.0
    c_vial: float = 1.0

    @classmethod
    def from_dict(cls, d) -> "Weights":
        d = d or {}
        return cls(float(d.get("c_d", 1.0)), float(d.get("c_neut", 1.0)), float(d.get("c_vial", 1.0)))


@dataclass(frozen=True)
class ControlVector:
    """Inverter set-points being optimized: Q (kVar) for RPC modes, P (kW) for APC."""

    values: np.ndarray
    mode: Mode


@dataclass(frozen=True)
class CostBreakdown:
    raw_cost: float
    penalized_cost: float
    n_violations: int
    deviation_term: float
    neutral_term: float
    curtailment_term: float = 0.0


def count_violations(voltages, limits=(0.95, 1.05)):
    """Count busbar-phase entries strictly outside ``limits``.

    Returns ``(n_upper, n_lower, worst)`` where ``worst`` maps each phase
    index with a violation to ``(busbar, value)`` of its extremal entry.
    Limits are inclusive: a value equal to a limit is not a violation.
    """
    v = np.asarray(voltages, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    lo, hi = limits
    with np.errstate(invalid="ignore"):
        upper = v > hi
        lower = v < lo
    worst = {}
    for ph in range(v.shape[1]):
        col = v[:, ph]
        if upper[:, ph].any():
            b = int(np.nanargmax(col))
            worst[ph] = (b, float(col[b]))
        elif lower[:, ph].any():
            b = int(np.nanargmin(col))
            worst[ph] = (b, float(col[b]))
    return int(upper.sum()), int(lower.sum()), worst


def n_violations(voltages, limits=(0.95, 1.05)) -> np.ndarray:
    """Vectorized violation count over the last two axes."""
    v = np.asarray(voltages, dtype=float)
    with np.errstate(invalid="ignore"):
        bad = (v > limits[1]) | (v < limits[0])
    return bad.sum(axis=(-2, -1))


def _deviation(voltages) -> np.ndarray:
    v = np.asarray(voltages, dtype=float)
    return np.nansum(np.abs(v - 1.0), axis=(-2, -1))


def _penalize(raw, n_viol, c_vial):
    return c_vial * np.exp(n_viol) * raw


def rpc_cost_batch(voltages, neutrals, weights: Weights, limits=(0.95, 1.05)) -> np.ndarray:
    dev = _deviation(voltages)
    neut = np.sum(np.asarray(neutrals, dtype=float), axis=-1)
    raw = weights.c_d * dev + weights.c_neut * neut
    return _penalize(raw, n_violations(voltages, limits), weights.c_vial)


def apc_cost_batch(dp, voltages, neutrals, weights: Weights, limits=(0.95, 1.05)) -> np.ndarray:
    dev = _deviation(voltages)
    neut = np.sum(np.asarray(neutrals, dtype=float), axis=-1)
    raw = np.sum(dp, axis=-1) + weights.c_d * dev + weights.c_neut * neut
    return _penalize(raw, n_violations(voltages, limits), weights.c_vial)


def rpc_cost(voltages, neutrals, weights: Weights = Weights(), limits=(0.95, 1.05)) -> CostBreakdown:
    """Deviation-plus-neutral cost with the exponential violation penalty.

    The deviation of a busbar is the sum over its served phases of
    ``|V - 1|``; the neutral voltage enters once per busbar.
    """
    dev = float(_deviation(voltages))
    neut = float(np.sum(neutrals))
    raw = weights.c_d * dev + weights.c_neut * neut
    nv = int(n_violations(voltages, limits))
    return CostBreakdown(raw, float(_penalize(raw, nv, weights.c_vial)), nv,
                         weights.c_d * dev, weights.c_neut * neut)


def apc_cost(dp, voltages, neutrals, weights: Weights = Weights(),
             limits=(0.95, 1.05)) -> CostBreakdown:
    """Curtailment cost: total kW curtailed plus the RPC terms, same penalty."""
    dp = np.asarray(dp, dtype=float)
    if np.any(dp < 0):
        raise ValueError("curtailment must be non-negative")
    dev = float(_deviation(voltages))
    neut = float(np.sum(neutrals))
    curt = float(dp.sum())
    raw = curt + weights.c_d * dev + weights.c_neut * neut
    nv = int(n_violations(voltages, limits))
    return CostBreakdown(raw, float(_penalize(raw, nv, weights.c_vial)), nv,
                         weights.c_d * dev, weights.c_neut * neut, curt)


# --------------------------------------------------------------------------
# capability circle

def _check(inv: PvInverter, p: float):
    if p > inv.rated_apparent * (1 + 1e-12) or p < 0:
        raise ValueError(f"inverter {inv.id}: active power {p} outside [0, {inv.rated_apparent}]")


def q_abs_max(inv: PvInverter, p=None) -> float:
    """Largest reactive absorption (kVar, positive number) at active output ``p``."""
    p = inv.current_active if p is None else p
    _check(inv, p)
    return math.sqrt(max(inv.rated_apparent ** 2 - p * p, 0.0))


def q_inj_max(inv: PvInverter, p=None) -> float:
    p = inv.current_active if p is None else p
    _check(inv, p)
    return math.sqrt(max(inv.rated_apparent ** 2 - p * p, 0.0))


def p_after_curtail(inv: PvInverter, dp: float, p=None) -> tuple[float, float]:
    """Move the inverter along its capability circle after curtailing ``dp`` kW.

    The returned ``(P, Q)`` has ``P = p - dp`` and ``Q`` at full absorption,
    so ``P**2 + Q**2 == S**2``.
    """
    p = inv.current_active if p is None else p
    _check(inv, p)
    if dp < 0 or dp > p * (1 + 1e-12):
        raise ValueError(f"curtailment {dp} outside [0, {p}]")
    new_p = max(p - dp, 0.0)
    return new_p, -math.sqrt(max(inv.rated_apparent ** 2 - new_p * new_p, 0.0))


def capability_q(rating: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Vectorized ``sqrt(S^2 - P^2)``."""
    return np.sqrt(np.maximum(rating ** 2 - p ** 2, 0.0))

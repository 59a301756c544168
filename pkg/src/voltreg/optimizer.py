"""Two-stage optimizer: feasible region search followed by particle swarm."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass
class FrsConfig:
    max_steps: int = 100
    alpha_schedule: Optional[Callable[[int, int], float]] = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def alphas(self) -> np.ndarray:
        n = self.max_steps
        if self.alpha_schedule is None:
            return np.arange(n + 1) / n
        a = np.array([self.alpha_schedule(i, n) for i in range(n + 1)], dtype=float)
        if a[0] != 0.0 or a[-1] != 1.0 or np.any(np.diff(a) <= 0):
            raise ValueError("alpha schedule must rise strictly from 0 to 1")
        return a


@dataclass
class PsoConfig:
    population: int = 50
    iterations: int = 100
    confidence_pb: float = 1.5
    confidence_gb: float = 1.5
    scatter_radius: float = 0.1
    inertia: float = 0.7
    velocity_clamp: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be at least 1")
        if not 0.0 <= self.scatter_radius <= 1.0:
            raise ValueError("scatter_radius must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclass
class OptimizationTrace:
    frs_steps_used: int = 0
    frs_exit: str = ""
    frs_alpha: float = 0.0
    global_best_cost: list = field(default_factory=list)
    wall_time: dict = field(default_factory=dict)
    evaluations: int = 0


def frs(initial, delta_max, evaluate, cfg: FrsConfig = FrsConfig()):
    """Drive ``initial`` along ``delta_max`` until the evaluation reports no violations.

    Every element moves by the same fraction ``alpha`` of its own maximum
    change.  ``evaluate(x)`` returns ``(voltages, n_violations)``.  The first
    scheduled ``alpha`` giving zero violations wins; if none does, the
    ``alpha = 1`` vector is returned with ``frs_exit == "exhausted"``.
    """
    x0 = np.asarray(initial, dtype=float)
    d = np.asarray(delta_max, dtype=float)
    trace = OptimizationTrace()
    t0 = time.perf_counter()
    x = x0
    for i, a in enumerate(cfg.alphas()):
        x = x0 + a * d
        _, nv = evaluate(x)
        trace.evaluations += 1
        if nv == 0:
            trace.frs_steps_used, trace.frs_exit, trace.frs_alpha = i, "feasible", float(a)
            break
    else:
        trace.frs_steps_used, trace.frs_exit, trace.frs_alpha = cfg.max_steps, "exhausted", 1.0
    trace.wall_time["frs"] = time.perf_counter() - t0
    return x, trace


def pso(initial, cost, lower, upper, cfg: PsoConfig = PsoConfig(), vectorized: bool = False,
        trace: Optional[OptimizationTrace] = None):
    """Particle swarm minimisation of ``cost`` inside the box ``[lower, upper]``.

    The swarm is scattered around ``initial`` (which is itself particle 0,
    so the result never scores worse than the starting point).  Velocity
    update: ``v = w v + Pb r1 (p - x) + Gb r2 (g - x)`` with uniform
    ``r1, r2`` drawn per particle and dimension, clamped to a fraction of
    each element's range; positions are clipped to the box.

    With ``vectorized=True``, ``cost`` receives the whole (population, M)
    array and returns one value per particle.  Non-finite costs count as
    ``+inf``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x0 = np.clip(np.asarray(initial, dtype=float), lower, upper)
    if np.any(np.abs(x0 - np.asarray(initial, dtype=float)) > 1e-9 * (1 + np.abs(x0))):
        raise ValueError("initial point lies outside the bounds")
    trace = trace if trace is not None else OptimizationTrace()
    rng = np.random.default_rng(cfg.rng_seed)
    n, m = cfg.population, x0.size
    span = upper - lower
    vmax = cfg.velocity_clamp * span

    def score(pos):
        if vectorized:
            c = np.asarray(cost(pos), dtype=float).reshape(n)
        else:
            c = np.array([cost(p) for p in pos], dtype=float)
        trace.evaluations += n
        return np.where(np.isfinite(c), c, np.inf)

    t0 = time.perf_counter()
    x = x0 + cfg.scatter_radius * span * rng.uniform(-1.0, 1.0, size=(n, m))
    x[0] = x0
    x = np.clip(x, lower, upper)
    vel = np.zeros((n, m))
    cost_x = score(x)
    pbest, pbest_cost = x.copy(), cost_x.copy()
    gi = int(np.argmin(pbest_cost))
    gbest, gcost = pbest[gi].copy(), pbest_cost[gi]
    history = [float(gcost)]
    for _ in range(cfg.iterations):
        r1 = rng.random((n, m))
        r2 = rng.random((n, m))
        vel = (cfg.inertia * vel + cfg.confidence_pb * r1 * (pbest - x)
               + cfg.confidence_gb * r2 * (gbest - x))
        vel = np.clip(vel, -vmax, vmax)
        x = np.clip(x + vel, lower, upper)
        cost_x = score(x)
        better = cost_x < pbest_cost
        pbest[better] = x[better]
        pbest_cost[better] = cost_x[better]
        gi = int(np.argmin(pbest_cost))
        if pbest_cost[gi] < gcost:
            gbest, gcost = pbest[gi].copy(), pbest_cost[gi]
        history.append(float(gcost))
    trace.global_best_cost.extend(history)
    trace.wall_time["pso"] = time.perf_counter() - t0
    return gbest, trace

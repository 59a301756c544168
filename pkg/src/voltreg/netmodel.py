"""Radial three-phase four-wire LV network model, file format and fixture generator.

Networks are stored as YAML documents with the top-level keys ``busbars``,
``lines``, ``transformer``, ``loads``, ``pv`` and ``limits``.  Busbar 0 is
the transformer secondary; every other busbar has exactly one parent.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

PHASES = ("a", "b", "c")
PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}


class NetworkError(ValueError):
    """Raised when a network file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Busbar:
    id: int
    parent: Optional[int]
    phase_set: str = "abc"


@dataclass(frozen=True)
class LineSegment:
    from_bus: int
    to_bus: int
    resistance_per_phase: float
    reactance_per_phase: float
    neutral_resistance: float
    neutral_reactance: float
    length: float = 0.0

    @property
    def z_phase(self) -> complex:
        return complex(self.resistance_per_phase, self.reactance_per_phase)

    @property
    def z_neutral(self) -> complex:
        return complex(self.neutral_resistance, self.neutral_reactance)


@dataclass(frozen=True)
class Transformer:
    """Delta-wye distribution transformer.

    ``series_admittance`` is the per-phase series admittance referred to the
    secondary side, in siemens.
    """

    rating: float
    primary_voltage: float
    secondary_voltage: float
    series_admittance: complex
    connection: str = "delta-wye"

    @property
    def turns_ratio(self) -> float:
        # delta winding sees line voltage, wye winding delivers phase voltage
        return self.secondary_voltage / math.sqrt(3.0) / self.primary_voltage

    @property
    def y_secondary(self) -> complex:
        return self.series_admittance

    @property
    def y_primary(self) -> complex:
        return self.series_admittance * self.turns_ratio

    @property
    def nominal_phase_voltage(self) -> float:
        return self.secondary_voltage / math.sqrt(3.0)


@dataclass(frozen=True)
class LoadPoint:
    busbar: int
    phase: str
    peak_active: float
    peak_reactive: float
    customer: Optional[int] = None

    @property
    def phases(self) -> str:
        return self.phase


@dataclass(frozen=True)
class PvInverter:
    id: int
    busbar: int
    phase: str
    rated_apparent: float
    current_active: float = 0.0
    current_reactive: float = 0.0


@dataclass(frozen=True)
class NetworkModel:
    busbars: tuple
    lines: tuple
    transformer: Transformer
    loads: tuple = ()
    inverters: tuple = ()
    voltage_limits: tuple = (0.95, 1.05)
    name: str = ""
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def n_busbars(self) -> int:
        return len(self.busbars)

    @property
    def n_inverters(self) -> int:
        return len(self.inverters)

    @property
    def n_customers(self) -> int:
        ids = {ld.customer if ld.customer is not None else ("load", i)
               for i, ld in enumerate(self.loads)}
        return len(ids)

    @property
    def v_nominal(self) -> float:
        return self.transformer.nominal_phase_voltage

    def with_inverters(self, inverters: Sequence[PvInverter]) -> "NetworkModel":
        return replace(self, inverters=tuple(inverters))

    def with_loads(self, loads: Sequence[LoadPoint]) -> "NetworkModel":
        return replace(self, loads=tuple(loads))

    def topology(self) -> "Topology":
        return Topology.from_model(self)


@dataclass(frozen=True)
class Topology:
    """Array views of the tree used by the solvers.

    ``path`` is the (n_bus, n_line) incidence of lines on the root-to-bus
    path; line ``k`` feeds busbar ``k + 1`` from ``parent[k + 1]``.
    """

    parent: np.ndarray
    order: np.ndarray
    path: np.ndarray
    z_phase: np.ndarray
    z_neutral: np.ndarray
    energized: np.ndarray

    @classmethod
    def from_model(cls, model: NetworkModel) -> "Topology":
        n = model.n_busbars
        parent = np.full(n, -1, dtype=int)
        for b in model.busbars:
            if b.parent is not None:
                parent[b.id] = b.parent
        z_phase = np.zeros(n - 1, dtype=complex)
        z_neutral = np.zeros(n - 1, dtype=complex)
        for ln in model.lines:
            child = ln.to_bus if parent[ln.to_bus] == ln.from_bus else ln.from_bus
            z_phase[child - 1] = ln.z_phase
            z_neutral[child - 1] = ln.z_neutral
        order = _bfs_order(parent)
        path = np.zeros((n, n - 1))
        for b in order[1:]:
            path[b] = path[parent[b]]
            path[b, b - 1] = 1.0
        energized = np.zeros((n, 3), dtype=bool)
        for b in model.busbars:
            for ph in b.phase_set:
                energized[b.id, PHASE_INDEX[ph]] = True
        return cls(parent, order, path, z_phase, z_neutral, energized)


def _bfs_order(parent: np.ndarray) -> np.ndarray:
    children: dict[int, list[int]] = {}
    for b, p in enumerate(parent):
        if p >= 0:
            children.setdefault(int(p), []).append(b)
    order, queue = [], deque([0])
    while queue:
        b = queue.popleft()
        order.append(b)
        queue.extend(children.get(b, []))
    return np.array(order, dtype=int)


# --------------------------------------------------------------------------
# validation

def validate_radial(model: NetworkModel) -> list[str]:
    """Return human-readable radiality violations; empty when the busbars form
    a single tree rooted at busbar 0 with one line per edge."""
    problems = []
    ids = [b.id for b in model.busbars]
    n = len(ids)
    if sorted(ids) != list(range(n)):
        problems.append("busbar ids are not dense 0..%d" % (n - 1))
    by_id = {b.id: b for b in model.busbars}
    if 0 in by_id and by_id[0].parent is not None:
        problems.append("root busbar 0 has a parent")
    for b in model.busbars:
        if b.id == 0:
            continue
        if b.parent is None:
            problems.append(f"orphan busbar {b.id}")
        elif b.parent == b.id:
            problems.append(f"self-loop at busbar {b.id}")
        elif b.parent not in by_id:
            problems.append(f"busbar {b.id} has unknown parent {b.parent}")

    seen = set()
    for ln in model.lines:
        key = (min(ln.from_bus, ln.to_bus), max(ln.from_bus, ln.to_bus))
        if ln.from_bus == ln.to_bus:
            problems.append(f"self-loop line {ln.from_bus}-{ln.to_bus}")
            continue
        if key in seen:
            problems.append(f"duplicate edge {ln.from_bus}-{ln.to_bus}")
            continue
        seen.add(key)
        a, b = by_id.get(ln.from_bus), by_id.get(ln.to_bus)
        if a is None or b is None:
            problems.append(f"line {ln.from_bus}-{ln.to_bus} references unknown busbar")
        elif b.parent != a.id and a.parent != b.id:
            problems.append(f"line {ln.from_bus}-{ln.to_bus} is not a tree edge")
    for b in model.busbars:
        if b.parent is not None and b.parent != b.id and b.parent in by_id:
            if (min(b.id, b.parent), max(b.id, b.parent)) not in seen:
                problems.append(f"missing line {b.parent}-{b.id}")

    # reachability from the root over parent links
    children: dict[int, list[int]] = {}
    for b in model.busbars:
        if b.parent is not None and b.parent != b.id:
            children.setdefault(b.parent, []).append(b.id)
    reached, queue = set(), deque([0] if 0 in by_id else [])
    while queue:
        u = queue.popleft()
        if u in reached:
            continue
        reached.add(u)
        queue.extend(children.get(u, []))
    for b in sorted(by_id):
        if b not in reached and by_id[b].parent != b:
            problems.append(f"unreachable busbar {b}")
    if not problems and len(model.lines) != n - 1:
        problems.append(f"expected {n - 1} lines, found {len(model.lines)}")
    return problems


def validate(model: NetworkModel) -> NetworkModel:
    """Check every model invariant, raising :class:`NetworkError` on the first failure."""
    problems = validate_radial(model)
    if problems:
        raise NetworkError(problems[0])
    by_id = {b.id: b for b in model.busbars}
    for b in model.busbars:
        if not b.phase_set or set(b.phase_set) - set(PHASES):
            raise NetworkError(f"busbar {b.id} has invalid phase set {b.phase_set!r}")
        if b.parent is not None and set(b.phase_set) - set(by_id[b.parent].phase_set):
            raise NetworkError(f"busbar {b.id} serves phases its parent lacks")
    for ln in model.lines:
        if ln.resistance_per_phase <= 0 or ln.reactance_per_phase <= 0:
            raise NetworkError(f"line {ln.from_bus}-{ln.to_bus} needs positive R and X")
        if ln.neutral_resistance < 0 or ln.neutral_reactance < 0:
            raise NetworkError(f"line {ln.from_bus}-{ln.to_bus} has negative neutral impedance")
    tr = model.transformer
    if tr.rating <= 0 or tr.primary_voltage <= 0 or tr.secondary_voltage <= 0:
        raise NetworkError("transformer rating and voltages must be positive")
    if tr.series_admittance == 0 or not np.isfinite(tr.series_admittance):
        raise NetworkError("transformer series admittance must be finite and nonzero")
    for ld in model.loads:
        if ld.busbar not in by_id:
            raise NetworkError(f"load on unknown busbar {ld.busbar}")
        if not ld.phase or set(ld.phase) - set(by_id[ld.busbar].phase_set):
            raise NetworkError(f"load phase {ld.phase!r} not served at busbar {ld.busbar}")
        if ld.peak_active < 0:
            raise NetworkError(f"negative peak load at busbar {ld.busbar}")
    inv_ids = [inv.id for inv in model.inverters]
    if len(set(inv_ids)) != len(inv_ids):
        raise NetworkError("duplicate inverter id")
    for inv in model.inverters:
        if inv.busbar not in by_id:
            raise NetworkError(f"inverter {inv.id} on unknown busbar {inv.busbar}")
        if inv.phase not in PHASES or inv.phase not in by_id[inv.busbar].phase_set:
            raise NetworkError(f"inverter {inv.id} phase {inv.phase!r} not served")
        if inv.rated_apparent <= 0:
            raise NetworkError(f"inverter {inv.id} needs a positive rating")
        if inv.current_active < 0:
            raise NetworkError(f"inverter {inv.id} consumes active power")
        s2 = inv.current_active ** 2 + inv.current_reactive ** 2
        if s2 > inv.rated_apparent ** 2 * (1 + 1e-12):
            raise NetworkError(f"inverter {inv.id} exceeds its apparent power rating")
    lo, hi = model.voltage_limits
    if not lo < 1.0 < hi:
        raise NetworkError("voltage limits must bracket 1.0 p.u")
    return model


# --------------------------------------------------------------------------
# serialization

def to_document(model: NetworkModel) -> dict:
    tr = model.transformer
    doc = {}
    if model.name:
        doc["name"] = model.name
    if model.metadata:
        doc["metadata"] = model.metadata
    doc["busbars"] = [{"id": b.id, "parent": b.parent, "phases": b.phase_set}
                      for b in model.busbars]
    doc["lines"] = [{"from": ln.from_bus, "to": ln.to_bus,
                     "r_ohm": ln.resistance_per_phase, "x_ohm": ln.reactance_per_phase,
                     "rn_ohm": ln.neutral_resistance, "xn_ohm": ln.neutral_reactance,
                     "length_m": ln.length}
                    for ln in model.lines]
    doc["transformer"] = {"kva": tr.rating, "v_primary": tr.primary_voltage,
                          "v_secondary": tr.secondary_voltage,
                          "y_real": tr.series_admittance.real,
                          "y_imag": tr.series_admittance.imag}
    loads = []
    for ld in model.loads:
        row = {"bus": ld.busbar, "phase": ld.phase,
               "p_kw": ld.peak_active, "q_kvar": ld.peak_reactive}
        if ld.customer is not None:
            row["customer"] = ld.customer
        loads.append(row)
    doc["loads"] = loads
    doc["pv"] = [{"id": inv.id, "bus": inv.busbar, "phase": inv.phase,
                  "s_kva": inv.rated_apparent, "p_kw": inv.current_active,
                  "q_kvar": inv.current_reactive}
                 for inv in model.inverters]
    doc["limits"] = {"lower_pu": model.voltage_limits[0], "upper_pu": model.voltage_limits[1]}
    return doc


def from_document(doc: dict) -> NetworkModel:
    """Build and validate a model from a parsed network document."""
    if not isinstance(doc, dict):
        raise NetworkError("network document must be a mapping")
    try:
        busbars = tuple(Busbar(int(b["id"]), None if b.get("parent") is None else int(b["parent"]),
                               str(b.get("phases", "abc")))
                        for b in doc["busbars"])
        lines = tuple(LineSegment(int(ln["from"]), int(ln["to"]), float(ln["r_ohm"]),
                                  float(ln["x_ohm"]), float(ln.get("rn_ohm", 0.0)),
                                  float(ln.get("xn_ohm", 0.0)), float(ln.get("length_m", 0.0)))
                      for ln in doc["lines"])
        t = doc["transformer"]
        transformer = Transformer(float(t["kva"]), float(t["v_primary"]), float(t["v_secondary"]),
                                  complex(float(t["y_real"]), float(t["y_imag"])))
        loads = tuple(LoadPoint(int(ld["bus"]), str(ld["phase"]), float(ld["p_kw"]),
                                float(ld.get("q_kvar", 0.0)),
                                None if ld.get("customer") is None else int(ld["customer"]))
                      for ld in doc.get("loads") or ())
        inverters = tuple(PvInverter(int(p["id"]), int(p["bus"]), str(p["phase"]),
                                     float(p["s_kva"]), float(p.get("p_kw", 0.0)),
                                     float(p.get("q_kvar", 0.0)))
                          for p in doc.get("pv") or ())
        lim = doc.get("limits") or {}
        limits = (float(lim.get("lower_pu", 0.95)), float(lim.get("upper_pu", 1.05)))
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkError(f"malformed network document: {exc!r}") from exc
    model = NetworkModel(busbars, lines, transformer, loads, inverters, limits,
                         name=str(doc.get("name", "")), metadata=dict(doc.get("metadata") or {}))
    return validate(model)


def load_network(path) -> NetworkModel:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise NetworkError(f"cannot parse {path}: {exc}") from exc
    return from_document(doc)


def dumps_network(model: NetworkModel) -> str:
    return yaml.safe_dump(to_document(model), sort_keys=False, default_flow_style=None, width=100)


def save_network(model: NetworkModel, path) -> None:
    Path(path).write_text(dumps_network(model))


def fixture_path(name: str = "lotus63.net") -> Path:
    return Path(__file__).parent / "data" / name


def load_fixture(name: str = "lotus63.net") -> NetworkModel:
    return load_network(fixture_path(name))


# --------------------------------------------------------------------------
# fixture synthesis

# seed of the bundled lotus63.net
FIXTURE_SEED = 23


@dataclass
class FixtureSpec:
    """Statistics the synthesized test network has to match.

    Cable defaults describe an ABC-Al/XLPE 3x70 + N54.6 aerial bundled
    conductor; they only seed the generated file and can be edited there.
    """

    n_busbars: int = 63
    n_customers: int = 286
    n_pv: int = 50
    pv_rating_kw: tuple = (2.0, 7.0)
    peak_load_kw: tuple = (0.5, 1.0)
    load_power_factor: float = 0.95
    three_phase_every: int = 11
    n_feeders: int = 3
    lateral_probability: float = 0.3
    span_m: tuple = (25.0, 42.0)
    r_ohm_per_km: float = 0.443
    x_ohm_per_km: float = 0.1
    rn_ohm_per_km: float = 0.63
    xn_ohm_per_km: float = 0.1
    transformer_kva: float = 400.0
    v_primary: float = 11000.0
    v_secondary: float = 415.0
    transformer_z_pu: float = 0.04
    transformer_x_over_r: float = 4.0
    pv_phase_bias: float = 0.5
    pv_biased_phase: str = "c"
    limits: tuple = (0.95, 1.05)


def synthesize_fixture(seed: int = FIXTURE_SEED, spec: Optional[FixtureSpec] = None) -> NetworkModel:
    """Generate a radial network with the requested statistics.

    Deterministic for a given seed.  Busbars attach to the tip of their
    feeder (or, with ``lateral_probability``, to a random busbar of that
    feeder); customers and PV are placed uniformly over busbars 1..N.
    Customer phases go round-robin; each inverter lands on
    ``pv_biased_phase`` with probability ``pv_phase_bias`` and on a uniformly
    drawn phase otherwise, so one phase carries more PV.
    """
    spec = spec or FixtureSpec()
    rng = np.random.default_rng(seed)
    n = spec.n_busbars
    if n < 2:
        raise NetworkError("a network needs at least two busbars")
    if spec.n_pv > 3 * (n - 1):
        raise NetworkError("more inverters than busbar-phase slots")

    busbars = [Busbar(0, None, "abc")]
    lines = []
    members: list[list[int]] = [[] for _ in range(max(1, spec.n_feeders))]
    for b in range(1, n):
        f = (b - 1) % len(members)
        feeder = members[f]
        if not feeder:
            parent = 0
        elif rng.random() < spec.lateral_probability:
            parent = int(feeder[rng.integers(len(feeder))])
        else:
            parent = feeder[-1]
        feeder.append(b)
        busbars.append(Busbar(b, parent, "abc"))
        km = rng.uniform(*spec.span_m) / 1000.0
        lines.append(LineSegment(parent, b, round(spec.r_ohm_per_km * km, 6),
                                 round(spec.x_ohm_per_km * km, 6),
                                 round(spec.rn_ohm_per_km * km, 6),
                                 round(spec.xn_ohm_per_km * km, 6), round(km * 1000.0, 2)))

    z_base = spec.v_secondary ** 2 / (spec.transformer_kva * 1e3)
    r_pu = spec.transformer_z_pu / math.sqrt(1 + spec.transformer_x_over_r ** 2)
    z = complex(r_pu, r_pu * spec.transformer_x_over_r) * z_base
    y = 1.0 / z
    transformer = Transformer(spec.transformer_kva, spec.v_primary, spec.v_secondary,
                              complex(round(y.real, 6), round(y.imag, 6)))

    tan_phi = math.tan(math.acos(spec.load_power_factor))
    loads = []
    for c in range(spec.n_customers):
        bus = int(rng.integers(1, n))
        peak = round(float(rng.uniform(*spec.peak_load_kw)), 4)
        q = round(peak * tan_phi, 4)
        if spec.three_phase_every and c % spec.three_phase_every == spec.three_phase_every - 1:
            for ph in PHASES:
                loads.append(LoadPoint(bus, ph, round(peak / 3, 4), round(q / 3, 4), c))
        else:
            loads.append(LoadPoint(bus, PHASES[c % 3], peak, q, c))

    inverters = []
    for j in range(spec.n_pv):
        bus = int(rng.integers(1, n))
        rating = round(float(rng.uniform(*spec.pv_rating_kw)), 3)
        if rng.random() < spec.pv_phase_bias:
            phase = spec.pv_biased_phase
        else:
            phase = PHASES[int(rng.integers(3))]
        inverters.append(PvInverter(j + 1, bus, phase, rating, 0.0, 0.0))

    meta = {"generator_seed": seed,
            "cable": "ABC-Al/XLPE 3x70 + N54.6 + 1x16 (datasheet defaults, replaceable)",
            "r_ohm_per_km": spec.r_ohm_per_km, "x_ohm_per_km": spec.x_ohm_per_km,
            "rn_ohm_per_km": spec.rn_ohm_per_km, "xn_ohm_per_km": spec.xn_ohm_per_km}
    model = NetworkModel(tuple(busbars), tuple(lines), transformer, tuple(loads),
                         tuple(inverters), tuple(spec.limits), name=f"synthetic{n}", metadata=meta)
    return validate(model)

"""Coupled network data model: case loading, validation, unit bookkeeping.

Electric quantities are stored in per-unit on the case's declared MVA base
(voltages as squared magnitudes in p.u.^2, currents as squared magnitudes).
Water quantities are SI: heads in m, flows in m^3/s, storage in m^3.

The pump head-gain line ``y_gain = head_slope * f + head_intercept`` (m per
m^3/s, m) doubles as the pump's electric characteristic: hydraulic power
rho*g*f*y_gain is converted to per-unit at load time, so
``eta * P_pump = power_quad * f^2 + power_lin * f`` holds with
``power_quad = K * head_slope`` and ``power_lin = K * head_intercept``
where ``K = rho*g / S_base``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CaseParseError, CaseValidationError, DanglingReferenceError

GRAVITY = 9.81             # m/s^2
WATER_DENSITY = 1000.0     # kg/m^3
SECONDS_PER_HOUR = 3600.0


def pipe_resistance(friction: float, length: float, diameter: float) -> float:
    """Darcy-Weisbach head-loss coefficient 8*fr*L / (pi^2 * g * D^5) in s^2/m^5.

    ``friction`` is the dimensionless surface-resistance coefficient, ``length``
    and ``diameter`` are in meters.  Raises ValueError on non-positive input.
    """
    if friction <= 0 or length <= 0 or diameter <= 0:
        raise ValueError(
            f"pipe_resistance requires positive inputs, got "
            f"friction={friction}, length={length}, diameter={diameter}"
        )
    return 8.0 * friction * length / (math.pi ** 2 * GRAVITY * diameter ** 5)


def hydraulic_power_coeff(s_base_mva: float) -> float:
    """Per-unit electric power produced by 1 m^3/s of flow against 1 m of head."""
    return WATER_DENSITY * GRAVITY / (s_base_mva * 1e6)


# ---------------------------------------------------------------------------
# electric side
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Generator:
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    c1: float = 0.0   # $/p.u.h
    c2: float = 0.0   # $/p.u.^2 h, convex


@dataclass(frozen=True)
class PvSite:
    p_profile: tuple[float, ...]
    q_profile: tuple[float, ...]


@dataclass(frozen=True)
class Bus:
    id: str
    v_min: float                      # p.u.^2
    v_max: float
    p_load: tuple[float, ...]
    q_load: tuple[float, ...]
    generator: Generator | None = None
    pv: PvSite | None = None
    bess_id: str | None = None
    pump_id: str | None = None


@dataclass(frozen=True)
class Line:
    from_bus: str
    to_bus: str
    r: float
    x: float
    i_max: float     # p.u.^2 squared-current cap
    s_max: float     # p.u. apparent-power cap


@dataclass(frozen=True)
class ElectricNetwork:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    root: str

    def bus(self, bus_id: str) -> Bus:
        return self._bus_map[bus_id]

    @property
    def _bus_map(self):
        return {b.id: b for b in self.buses}

    def bfs_order(self) -> tuple[list[str], dict[str, str | None], dict[str, list[str]]]:
        """Root-first bus order, parent map, and children map (ignores direction)."""
        adj: dict[str, list[str]] = {b.id: [] for b in self.buses}
        for ln in self.lines:
            if ln.from_bus in adj and ln.to_bus in adj:
                adj[ln.from_bus].append(ln.to_bus)
                adj[ln.to_bus].append(ln.from_bus)
        order, parent = [], {self.root: None}
        children: dict[str, list[str]] = {b.id: [] for b in self.buses}
        queue = [self.root] if self.root in adj else []
        seen = set(queue)
        while queue:
            u = queue.pop(0)
            order.append(u)
            for v in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    parent[v] = u
                    children[u].append(v)
                    queue.append(v)
        return order, parent, children


# ---------------------------------------------------------------------------
# storage devices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BessUnit:
    id: str
    bus: str
    r_batt: float       # p.u. battery-side loss coefficient
    r_cvt: float        # p.u. converter-side loss coefficient
    s_max: float        # p.u. apparent-power cap
    e_min: float        # p.u.h
    e_max: float
    e_init: float


@dataclass(frozen=True)
class Tank:
    id: str
    node: str
    s_min: float        # m^3
    s_max: float
    s_init: float
    owner: str          # "utility" | "customer"


@dataclass(frozen=True)
class IrrigationLoad:
    id: str
    node: str                       # water node carrying the customer tank
    rate: float                     # m^3/s drawn while irrigating
    hours_on: int                   # required on-periods per horizon
    demand_draw: tuple[float, ...]  # uncontrollable draw from the customer tank


# ---------------------------------------------------------------------------
# water side
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceLimits:
    w_min: float
    w_max: float


@dataclass(frozen=True)
class WaterNode:
    id: str
    elevation: float                 # m
    y_min: float                     # m pressure-head bounds
    y_max: float
    demand: tuple[float, ...]        # m^3/s uncontrollable draw
    source: SourceLimits | None = None


@dataclass(frozen=True)
class Pipe:
    id: str
    from_node: str
    to_node: str
    r_hyd: float         # s^2/m^5 head-loss coefficient
    f_min: float         # m^3/s
    f_max: float


@dataclass(frozen=True)
class Pump:
    id: str
    pipe: str
    bus: str
    head_slope: float        # m per m^3/s
    head_intercept: float    # m (shutoff head)
    efficiency: float
    pq_ratio: float          # fixed P/Q ratio of the motor
    power_quad: float = 0.0  # derived: p.u. per (m^3/s)^2
    power_lin: float = 0.0   # derived: p.u. per (m^3/s)

    def head_gain(self, f: float) -> float:
        return self.head_slope * f + self.head_intercept

    def shaft_power(self, f):
        """Electric power (p.u.) drawn at flow ``f`` while running."""
        return (self.power_quad * f * f + self.power_lin * f) / self.efficiency


@dataclass(frozen=True)
class WaterNetwork:
    nodes: tuple[WaterNode, ...]
    pipes: tuple[Pipe, ...]
    pumps: tuple[Pump, ...]
    tanks: tuple[Tank, ...]
    irrigation: tuple[IrrigationLoad, ...] = ()

    def node(self, node_id: str) -> WaterNode:
        return {n.id: n for n in self.nodes}[node_id]

    def pipe(self, pipe_id: str) -> Pipe:
        return {p.id: p for p in self.pipes}[pipe_id]

    def pump_for_pipe(self, pipe_id: str) -> Pump | None:
        for p in self.pumps:
            if p.pipe == pipe_id:
                return p
        return None

    def incidence(self):
        """Node-by-pipe incidence matrix: +1 at the tail, -1 at the head."""
        import numpy as np

        idx = {n.id: i for i, n in enumerate(self.nodes)}
        a = np.zeros((len(self.nodes), len(self.pipes)))
        for k, pipe in enumerate(self.pipes):
            a[idx[pipe.from_node], k] = 1.0
            a[idx[pipe.to_node], k] = -1.0
        return a


# ---------------------------------------------------------------------------
# whole case
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    periods: int
    dt_hours: float = 1.0


@dataclass(frozen=True)
class NexusCase:
    name: str
    electric: ElectricNetwork
    water: WaterNetwork
    bess: tuple[BessUnit, ...]
    time: TimeGrid
    prices: tuple[float, ...]     # $/p.u.h at the grid connection
    s_base_mva: float
    v_base_kv: float

    def bess_unit(self, bess_id: str) -> BessUnit:
        return {b.id: b for b in self.bess}[bess_id]

    def pump(self, pump_id: str) -> Pump:
        return {p.id: p for p in self.water.pumps}[pump_id]


@dataclass
class ValidationReport:
    """Outcome of :func:`validate_case`.

    ``violations`` are hard errors; ``flags`` are informational notes (for
    example lines whose rating exceeds the single-cut applicability condition
    ``s_max^2 <= v_min * i_max`` and therefore route through the general
    four-case cut selector).
    """
    violations: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _profile(raw, periods, what):
    if isinstance(raw, (int, float)):
        return tuple(float(raw) for _ in range(periods))
    vals = tuple(float(v) for v in raw)
    if len(vals) != periods:
        raise CaseParseError(f"{what}: expected {periods} entries, got {len(vals)}")
    return vals


def load_case(path) -> NexusCase:
    """Load, unit-normalize, and validate a case file.

    Raises :class:`CaseParseError` for malformed files,
    :class:`DanglingReferenceError` for unresolved cross-references, and
    :class:`CaseValidationError` when a structural invariant is violated.
    """
    path = Path(path)
    if not path.exists():
        raise CaseParseError(f"case file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"case file {path} is not valid JSON: {exc}") from exc
    try:
        case = _case_from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseParseError(f"case file {path} has unexpected structure: {exc!r}") from exc

    _check_references(case)
    report = validate_case(case)
    if not report.ok:
        raise CaseValidationError(report.violations)
    return case


def _case_from_dict(raw: dict) -> NexusCase:
    time = TimeGrid(int(raw["time"]["periods"]), float(raw["time"].get("dt_hours", 1.0)))
    t = time.periods
    bases = raw["bases"]
    s_base = float(bases["s_base_mva"])
    kappa = hydraulic_power_coeff(s_base)

    buses = []
    for b in raw["electric"]["buses"]:
        gen = None
        if b.get("generator"):
            g = b["generator"]
            gen = Generator(float(g["p_min"]), float(g["p_max"]),
                            float(g["q_min"]), float(g["q_max"]),
                            float(g.get("c1", 0.0)), float(g.get("c2", 0.0)))
        pv = None
        if b.get("pv"):
            pv = PvSite(_profile(b["pv"]["p_profile"], t, f"pv p at {b['id']}"),
                        _profile(b["pv"].get("q_profile", 0.0), t, f"pv q at {b['id']}"))
        buses.append(Bus(
            id=str(b["id"]),
            v_min=float(b["v_min"]), v_max=float(b["v_max"]),
            p_load=_profile(b.get("p_load", 0.0), t, f"p_load at {b['id']}"),
            q_load=_profile(b.get("q_load", 0.0), t, f"q_load at {b['id']}"),
            generator=gen, pv=pv,
            bess_id=b.get("bess"), pump_id=b.get("pump"),
        ))
    lines = [Line(str(ln["from"]), str(ln["to"]), float(ln["r"]), float(ln["x"]),
                  float(ln["i_max"]), float(ln["s_max"]))
             for ln in raw["electric"]["lines"]]
    electric = ElectricNetwork(tuple(buses), tuple(lines), str(raw["electric"]["root"]))

    bess = tuple(
        BessUnit(str(b["id"]), str(b["bus"]), float(b["r_batt"]), float(b["r_cvt"]),
                 float(b["s_max"]), float(b["e_min"]), float(b["e_max"]), float(b["e_init"]))
        for b in raw.get("bess", [])
    )

    w = raw["water"]
    nodes = []
    for n in w["nodes"]:
        source = None
        if n.get("source"):
            source = SourceLimits(float(n["source"]["w_min"]), float(n["source"]["w_max"]))
        nodes.append(WaterNode(
            id=str(n["id"]), elevation=float(n.get("elevation", 0.0)),
            y_min=float(n["y_min"]), y_max=float(n["y_max"]),
            demand=_profile(n.get("demand", 0.0), t, f"demand at {n['id']}"),
            source=source,
        ))
    pipes = [Pipe(str(p["id"]), str(p["from"]), str(p["to"]), float(p["r_hyd"]),
                  float(p["f_min"]), float(p["f_max"]))
             for p in w["pipes"]]
    pumps = []
    for p in w.get("pumps", []):
        slope, intercept = float(p["head_slope"]), float(p["head_intercept"])
        pumps.append(Pump(
            id=str(p["id"]), pipe=str(p["pipe"]), bus=str(p["bus"]),
            head_slope=slope, head_intercept=intercept,
            efficiency=float(p["efficiency"]), pq_ratio=float(p["pq_ratio"]),
            power_quad=kappa * slope, power_lin=kappa * intercept,
        ))
    tanks = tuple(Tank(str(tk["id"]), str(tk["node"]), float(tk["s_min"]),
                       float(tk["s_max"]), float(tk["s_init"]), str(tk["owner"]))
                  for tk in w.get("tanks", []))
    irrigation = tuple(
        IrrigationLoad(str(ir["id"]), str(ir["node"]), float(ir["rate"]),
                       int(ir["hours_per_day"]),
                       _profile(ir.get("demand_draw", 0.0), t, f"demand_draw at {ir['id']}"))
        for ir in w.get("irrigation", [])
    )
    water = WaterNetwork(tuple(nodes), tuple(pipes), tuple(pumps), tanks, irrigation)

    return NexusCase(
        name=str(raw.get("name", "case")),
        electric=electric, water=water, bess=bess, time=time,
        prices=_profile(raw["prices"], t, "prices"),
        s_base_mva=s_base, v_base_kv=float(bases["v_base_kv"]),
    )


def _check_references(case: NexusCase):
    bus_ids = {b.id for b in case.electric.buses}
    node_ids = {n.id for n in case.water.nodes}
    pipe_ids = {p.id for p in case.water.pipes}
    bess_ids = {b.id for b in case.bess}
    pump_ids = {p.id for p in case.water.pumps}
    tank_nodes = {tk.node: tk for tk in case.water.tanks}

    missing = []
    for ln in case.electric.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in bus_ids:
                missing.append(f"line {ln.from_bus}-{ln.to_bus} references unknown bus {end}")
    if case.electric.root not in bus_ids:
        missing.append(f"root bus {case.electric.root} not present")
    for b in case.electric.buses:
        if b.bess_id and b.bess_id not in bess_ids:
            missing.append(f"bus {b.id} references unknown storage unit {b.bess_id}")
        if b.pump_id and b.pump_id not in pump_ids:
            missing.append(f"bus {b.id} references unknown pump {b.pump_id}")
    for unit in case.bess:
        if unit.bus not in bus_ids:
            missing.append(f"storage unit {unit.id} references unknown bus {unit.bus}")
    for p in case.water.pipes:
        for end in (p.from_node, p.to_node):
            if end not in node_ids:
                missing.append(f"pipe {p.id} references unknown node {end}")
    for pm in case.water.pumps:
        if pm.pipe not in pipe_ids:
            missing.append(f"pump {pm.id} references unknown pipe {pm.pipe}")
        if pm.bus not in bus_ids:
            missing.append(f"pump {pm.id} references unknown bus {pm.bus}")
    for tk in case.water.tanks:
        if tk.node not in node_ids:
            missing.append(f"tank {tk.id} references unknown node {tk.node}")
    for ir in case.water.irrigation:
        if ir.node not in node_ids:
            missing.append(f"irrigation load {ir.id} references unknown node {ir.node}")
        elif ir.node not in tank_nodes or tank_nodes[ir.node].owner != "customer":
            missing.append(f"irrigation load {ir.id} needs a customer-owned tank at node {ir.node}")
    if missing:
        raise DanglingReferenceError(missing)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

# Eq. (8)-style four-line pipe relaxations are only a valid envelope when the
# forward/backward flow caps are within this ratio of each other.
POLYGON_RATIO_LIMIT = 1.0 + math.sqrt(2.0)


def validate_case(case: NexusCase) -> ValidationReport:
    """Check every structural invariant; returns a report, never raises."""
    rep = ValidationReport()
    t = case.time.periods
    bad = rep.violations.append

    if case.time.periods < 1 or case.time.dt_hours <= 0:
        bad(f"time grid must have >=1 periods of positive length, got {case.time}")
    if len(case.prices) != t:
        bad(f"price profile length {len(case.prices)} != {t} periods")
    if any(p < 0 for p in case.prices):
        bad("price profile must be nonnegative")

    # electric graph: radial tree rooted at the grid connection
    el = case.electric
    n_bus, n_line = len(el.buses), len(el.lines)
    if n_line != n_bus - 1:
        bad(f"electric graph must be a tree: {n_bus} buses need {n_bus - 1} lines, got {n_line}")
    order, parent, _ = el.bfs_order()
    if len(order) != n_bus:
        unreached = sorted({b.id for b in el.buses} - set(order))
        bad(f"buses unreachable from root {el.root}: {unreached}")
    seen_pairs = set()
    for ln in el.lines:
        if (ln.from_bus, ln.to_bus) in seen_pairs or (ln.to_bus, ln.from_bus) in seen_pairs:
            bad(f"duplicate line between {ln.from_bus} and {ln.to_bus}")
        seen_pairs.add((ln.from_bus, ln.to_bus))
        if ln.r < 0 or ln.x < 0:
            bad(f"line {ln.from_bus}-{ln.to_bus} has negative impedance")
        if ln.s_max <= 0:
            bad(f"line {ln.from_bus}-{ln.to_bus} needs positive apparent-power cap")
        if ln.i_max <= 0:
            bad(f"line {ln.from_bus}-{ln.to_bus} needs positive current cap")
        sending = next((b for b in el.buses if b.id == ln.from_bus), None)
        if sending is not None and ln.s_max ** 2 > sending.v_min * ln.i_max:
            rep.flags.append(
                f"line {ln.from_bus}-{ln.to_bus}: s_max^2 > v_min*i_max, "
                "general cut selection applies"
            )
    for b in el.buses:
        if not b.v_min < b.v_max:
            bad(f"bus {b.id}: voltage bounds must satisfy v_min < v_max")
        if len(b.p_load) != t or len(b.q_load) != t:
            bad(f"bus {b.id}: load profile length != {t}")
        if b.pv and (len(b.pv.p_profile) != t or len(b.pv.q_profile) != t):
            bad(f"bus {b.id}: pv profile length != {t}")
        if b.generator and (b.generator.p_min > b.generator.p_max
                            or b.generator.q_min > b.generator.q_max):
            bad(f"bus {b.id}: generator limits out of order")
        if b.generator and b.generator.c2 < 0:
            bad(f"bus {b.id}: generator quadratic cost must be convex (c2 >= 0)")

    for unit in case.bess:
        if unit.r_batt < 0 or unit.r_cvt < 0:
            bad(f"storage {unit.id}: loss coefficients must be nonnegative")
        if unit.s_max <= 0:
            bad(f"storage {unit.id}: apparent-power cap must be positive")
        if not unit.e_min <= unit.e_init <= unit.e_max:
            bad(f"storage {unit.id}: need e_min <= e_init <= e_max")

    # water graph
    w = case.water
    pump_pipes = {p.pipe for p in w.pumps}
    node_ids = {n.id for n in w.nodes}
    if w.pipes:
        a = w.incidence()
        if abs(a.sum(axis=0)).max() > 0:
            bad("incidence matrix columns must each sum to zero")
    for p in w.pipes:
        if p.r_hyd <= 0:
            bad(f"pipe {p.id}: head-loss coefficient must be positive")
        if p.id in pump_pipes:
            if p.f_min != 0.0:
                bad(f"pump pipe {p.id}: requires f_min = 0")
            if p.f_max <= 0:
                bad(f"pump pipe {p.id}: requires f_max > 0")
        else:
            if not p.f_min < p.f_max:
                bad(f"pipe {p.id}: requires f_min < f_max")
            if p.f_min < 0 < p.f_max:
                ratio = max(-p.f_min / p.f_max, p.f_max / -p.f_min)
                if ratio > POLYGON_RATIO_LIMIT + 1e-12:
                    bad(f"pipe {p.id}: |f_min|/f_max ratio {ratio:.3f} outside the "
                        f"four-line envelope validity band (<= {POLYGON_RATIO_LIMIT:.4f})")
    for n in w.nodes:
        if n.y_min > n.y_max:
            bad(f"node {n.id}: head bounds out of order")
        if len(n.demand) != t:
            bad(f"node {n.id}: demand profile length != {t}")
        if n.source and n.source.w_min > n.source.w_max:
            bad(f"node {n.id}: source limits out of order")
        if n.source and n.y_min != n.y_max:
            bad(f"node {n.id}: source nodes must pin their head (y_min == y_max)")
    for pm in w.pumps:
        if not 0 < pm.efficiency <= 1:
            bad(f"pump {pm.id}: efficiency must be in (0, 1]")
        if pm.head_intercept <= 0:
            bad(f"pump {pm.id}: shutoff head must be positive")
        if pm.head_slope < 0:
            bad(f"pump {pm.id}: head-gain slope must be nonnegative")
        if pm.pq_ratio <= 0:
            bad(f"pump {pm.id}: P/Q ratio must be positive")
    for tk in w.tanks:
        if not tk.s_min <= tk.s_init <= tk.s_max:
            bad(f"tank {tk.id}: need s_min <= s_init <= s_max")
        if tk.owner not in ("utility", "customer"):
            bad(f"tank {tk.id}: owner must be 'utility' or 'customer'")
    for ir in w.irrigation:
        if ir.rate <= 0:
            bad(f"irrigation {ir.id}: rate must be positive")
        if not 0 <= ir.hours_on <= t:
            bad(f"irrigation {ir.id}: hours_per_day must be within [0, {t}]")
        if len(ir.demand_draw) != t:
            bad(f"irrigation {ir.id}: demand_draw profile length != {t}")
    if not any(n.source for n in w.nodes) and w.nodes:
        bad("water network needs at least one source node (fixed-head reference)")

    return rep


# ---------------------------------------------------------------------------
# profile export
# ---------------------------------------------------------------------------

def list_profiles(case: NexusCase) -> dict[str, tuple[float, ...]]:
    """All named per-period series in the case, for CSV export."""
    out: dict[str, tuple[float, ...]] = {"prices": case.prices}
    for b in case.electric.buses:
        if any(b.p_load):
            out[f"p_load[{b.id}]"] = b.p_load
        if any(b.q_load):
            out[f"q_load[{b.id}]"] = b.q_load
        if b.pv:
            out[f"pv_p[{b.id}]"] = b.pv.p_profile
    for n in case.water.nodes:
        if any(n.demand):
            out[f"water_demand[{n.id}]"] = n.demand
    for ir in case.water.irrigation:
        out[f"irrigation_demand_draw[{ir.id}]"] = ir.demand_draw
    return out


def profile_csv(case: NexusCase, names=None) -> str:
    """Render selected profiles (default: all) as CSV text."""
    profiles = list_profiles(case)
    if names:
        unknown = [n for n in names if n not in profiles]
        if unknown:
            raise KeyError(f"unknown profiles: {unknown}; available: {sorted(profiles)}")
        profiles = {n: profiles[n] for n in names}
    buf = io.StringIO()
    writer = csv.writer(buf)
    cols = sorted(profiles)
    writer.writerow(["t"] + cols)
    for t in range(case.time.periods):
        writer.writerow([t] + [repr(profiles[c][t]) for c in cols])
    return buf.getvalue()

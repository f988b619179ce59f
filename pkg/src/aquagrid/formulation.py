"""Indexed constraint systems for the coupled scheduling problem.

Builders translate a :class:`~aquagrid.network.NexusCase` into one of:

* :func:`build_minlp` -- the exact mixed-integer nonlinear model (nonconvex
  couplings kept as structured records; used by verification and tiny
  brute-force studies, never by the cone solver),
* :func:`build_micp` -- the mixed-integer convex relaxation in which every
  nonconvex coupling is replaced by its envelope from :mod:`aquagrid.hulls`,
* :func:`build_dsm` -- the relaxation plus flexible irrigation scheduling,
* :func:`build_independent` -- the two-stage baseline (water-only pump
  scheduling, then electric-only dispatch with pump power fixed).

Systems are plain data once built: variables with bounds, sparse linear
blocks, convex-quadratic rows, rotated-cone rows, binaries (linear terms
only), and an objective.  Block row counts follow closed forms documented in
:meth:`ConstraintSystem.count_summary`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BuildError
from .hulls import HullSpec, hull_constraints, pipe_polygon, parabola_secant, pump_power_hull
from .network import NexusCase, SECONDS_PER_HOUR, Pipe

SLACK_VOLTAGE_SQ = 1.0   # squared voltage pinned at the grid connection


# ---------------------------------------------------------------------------
# constraint containers
# ---------------------------------------------------------------------------

@dataclass
class QuadRow:
    """``sum q_i x_i^2 + sum l_j x_j <= rhs`` with nonnegative ``q_i``."""
    quad: list            # [(var_idx, coef), ...]
    lin: list             # [(var_idx, coef), ...]
    rhs: float
    label: str


@dataclass
class RotatedConeRow:
    """``a*x1^2 + b*x2^2 <= x3*x4`` (``x2`` optional, ``x3``, ``x4`` >= 0)."""
    a: float
    i1: int
    b: float
    i2: int | None
    i3: int
    i4: int
    label: str


@dataclass
class NonconvexRecord:
    """One nonconvex relation of the exact model, kept in evaluable form.

    kinds: ``branch_coupling`` (P^2+Q^2 = V*I), ``storage_loss``
    (a*P^2+b*Q^2 = L*V), ``pipe_loss`` (dy+dh = R*sgn(f)*f^2),
    ``pump_channel`` (dy+dh+ygain+M*(alpha-1) <= R*f^2, concave side),
    ``pump_power`` (eta*P = a1*f^2 + a0*f).
    """
    kind: str
    refs: dict            # name -> var index
    params: dict
    label: str

    def residual(self, x) -> float:
        r, p = self.refs, self.params
        if self.kind == "branch_coupling":
            return x[r["p"]] ** 2 + x[r["q"]] ** 2 - x[r["v"]] * x[r["i"]]
        if self.kind == "storage_loss":
            return (p["a"] * x[r["p"]] ** 2 + p["b"] * x[r["q"]] ** 2
                    - x[r["loss"]] * x[r["v"]])
        if self.kind == "pipe_loss":
            f = x[r["f"]]
            sgn = -1.0 if f <= 0 else 1.0
            return x[r["y_i"]] - x[r["y_j"]] + p["dh"] - p["r_hyd"] * sgn * f * f
        if self.kind == "pump_channel":
            f = x[r["f"]]
            lhs = (x[r["y_i"]] - x[r["y_j"]] + p["dh"] + x[r["ygain"]]
                   + p["big_m"] * (x[r["alpha"]] - 1.0))
            return max(0.0, lhs - p["r_hyd"] * f * f)
        if self.kind == "pump_power":
            f = x[r["f"]]
            return (p["eta"] * x[r["p_pump"]]
                    - p["a1"] * f * f - p["a0"] * f)
        raise ValueError(f"unknown record kind {self.kind}")


class ConstraintSystem:
    """Variables, constraint blocks, and objective of one model variant."""

    def __init__(self, case: NexusCase, variant: str):
        self.case = case
        self.variant = variant
        self.var_names: list[str] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self.binary_idx: list[int] = []
        self._index: dict[tuple, int] = {}
        self._eq_rows: list[tuple[list, float, str]] = []
        self._ub_rows: list[tuple[list, float, str]] = []
        self.quads: list[QuadRow] = []
        self.rcones: list[RotatedConeRow] = []
        self.nonconvex: list[NonconvexRecord] = []
        self.obj_lin: dict[int, float] = {}
        self.obj_quad: dict[int, float] = {}
        self._final = None

    # -- construction -------------------------------------------------------

    def add_var(self, name, lb, ub, key, binary=False) -> int:
        idx = len(self.var_names)
        self.var_names.append(name)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        if binary:
            self.binary_idx.append(idx)
        if key in self._index:
            raise BuildError(f"duplicate variable key {key}")
        self._index[key] = idx
        return idx

    def idx(self, *key) -> int:
        return self._index[key]

    def has(self, *key) -> bool:
        return key in self._index

    def add_eq(self, terms, rhs, label):
        self._eq_rows.append((list(terms), float(rhs), label))

    def add_le(self, terms, rhs, label):
        self._ub_rows.append((list(terms), float(rhs), label))

    def add_quad(self, quad, lin, rhs, label):
        self.quads.append(QuadRow(list(quad), list(lin), float(rhs), label))

    def add_rcone(self, a, i1, b, i2, i3, i4, label):
        self.rcones.append(RotatedConeRow(a, i1, b, i2, i3, i4, label))

    def add_obj(self, idx, lin=0.0, quad=0.0):
        if lin:
            self.obj_lin[idx] = self.obj_lin.get(idx, 0.0) + lin
        if quad:
            self.obj_quad[idx] = self.obj_quad.get(idx, 0.0) + quad

    # -- finalized views ----------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    def _rows_to_csr(self, rows):
        data, ri, ci = [], [], []
        rhs = np.zeros(len(rows))
        labels = []
        for k, (terms, b, label) in enumerate(rows):
            rhs[k] = b
            labels.append(label)
            for j, coef in terms:
                ri.append(k)
                ci.append(j)
                data.append(coef)
        mat = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), self.n_vars))
        mat.sum_duplicates()
        return mat, rhs, labels

    def finalize(self):
        if self._final is None:
            a_eq, b_eq, eq_labels = self._rows_to_csr(self._eq_rows)
            a_ub, b_ub, ub_labels = self._rows_to_csr(self._ub_rows)
            self._final = {
                "a_eq": a_eq, "b_eq": b_eq, "eq_labels": eq_labels,
                "a_ub": a_ub, "b_ub": b_ub, "ub_labels": ub_labels,
                "lb": np.array(self._lb), "ub": np.array(self._ub),
                "c": self._obj_vector(),
            }
        return self._final

    def _obj_vector(self):
        c = np.zeros(self.n_vars)
        for j, v in self.obj_lin.items():
            c[j] = v
        return c

    @property
    def lb(self):
        return self.finalize()["lb"]

    @property
    def ub(self):
        return self.finalize()["ub"]

    def objective_value(self, x) -> float:
        val = float(self.finalize()["c"] @ x)
        for j, q in self.obj_quad.items():
            val += q * x[j] ** 2
        return val

    def evaluate(self, x, binary_tol=1e-6) -> dict:
        """Worst violations of every block at ``x`` (nonconvex excluded)."""
        f = self.finalize()
        out = {}
        out["bounds"] = float(max(np.max(f["lb"] - x, initial=0.0),
                                  np.max(x - f["ub"], initial=0.0)))
        if f["a_eq"].shape[0]:
            out["linear_eq"] = float(np.abs(f["a_eq"] @ x - f["b_eq"]).max())
        if f["a_ub"].shape[0]:
            out["linear_le"] = float(np.max(f["a_ub"] @ x - f["b_ub"], initial=0.0))
        if self.quads:
            worst = 0.0
            for row in self.quads:
                v = sum(c * x[j] ** 2 for j, c in row.quad)
                v += sum(c * x[j] for j, c in row.lin)
                worst = max(worst, v - row.rhs)
            out["quad"] = float(worst)
        if self.rcones:
            worst = 0.0
            for rc in self.rcones:
                v = rc.a * x[rc.i1] ** 2 - x[rc.i3] * x[rc.i4]
                if rc.i2 is not None:
                    v += rc.b * x[rc.i2] ** 2
                worst = max(worst, v)
            out["rcone"] = float(worst)
        if self.binary_idx:
            vals = x[np.array(self.binary_idx)]
            out["integrality"] = float(np.abs(vals - np.round(vals)).max())
        return out

    def max_violation(self, x) -> float:
        return max(self.evaluate(x).values())

    def count_summary(self) -> dict:
        """Block sizes; closed forms over (buses, lines, pipes, pumps, T)."""
        return {
            "variables": self.n_vars,
            "binaries": len(self.binary_idx),
            "linear_eq": len(self._eq_rows),
            "linear_le": len(self._ub_rows),
            "quad": len(self.quads),
            "rotated_cone": len(self.rcones),
            "nonconvex": len(self.nonconvex),
        }

    def to_json_dict(self) -> dict:
        """Interchange dump for debugging and external cross-checks."""
        f = self.finalize()

        def rows(mat, rhs, labels):
            m = mat.tocoo()
            return {
                "shape": list(mat.shape),
                "rows": m.row.tolist(), "cols": m.col.tolist(),
                "values": m.data.tolist(), "rhs": rhs.tolist(),
                "labels": labels,
            }

        return {
            "variant": self.variant,
            "variables": [
                {"name": n, "lb": _json_f(f["lb"][i]), "ub": _json_f(f["ub"][i]),
                 "binary": i in set(self.binary_idx)}
                for i, n in enumerate(self.var_names)
            ],
            "linear_eq": rows(f["a_eq"], f["b_eq"], f["eq_labels"]),
            "linear_le": rows(f["a_ub"], f["b_ub"], f["ub_labels"]),
            "quad": [{"quad": q.quad, "lin": q.lin, "rhs": q.rhs, "label": q.label}
                     for q in self.quads],
            "rotated_cone": [{"a": rc.a, "i1": rc.i1, "b": rc.b, "i2": rc.i2,
                              "i3": rc.i3, "i4": rc.i4, "label": rc.label}
                             for rc in self.rcones],
            "nonconvex": [{"kind": r.kind, "refs": r.refs, "params": r.params,
                           "label": r.label} for r in self.nonconvex],
            "objective": {"linear": {str(k): v for k, v in sorted(self.obj_lin.items())},
                          "quad": {str(k): v for k, v in sorted(self.obj_quad.items())}},
        }


def _json_f(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return float(v)


# ---------------------------------------------------------------------------
# big-M
# ---------------------------------------------------------------------------

def big_m_value(case: NexusCase, pipe_id: str) -> float:
    """Tightest per-pipe constant that deactivates the pump channel relations.

    Covers the largest possible slack of either channel inequality over the
    head boxes (both orientations), the full-flow loss, and the flow cap.
    """
    pipe = case.water.pipe(pipe_id)
    ni = case.water.node(pipe.from_node)
    nj = case.water.node(pipe.to_node)
    if not all(map(math.isfinite, (ni.y_min, ni.y_max, nj.y_min, nj.y_max, pipe.f_max))):
        raise BuildError(f"pipe {pipe_id}: big-M needs finite head and flow bounds")
    pump = case.water.pump_for_pipe(pipe_id)
    gain_max = pump.head_gain(pipe.f_max) if pump else 0.0
    forward = ni.y_max - nj.y_min + ni.elevation - nj.elevation + gain_max
    backward = nj.y_max - ni.y_min + nj.elevation - ni.elevation
    return max(forward, backward, pipe.r_hyd * pipe.f_max ** 2, pipe.f_max)


# ---------------------------------------------------------------------------
# shared builder plumbing
# ---------------------------------------------------------------------------

def _line_id(ln) -> str:
    return f"{ln.from_bus}-{ln.to_bus}"


def _add_electric_vars(sys_: ConstraintSystem, periods):
    case = sys_.case
    el = case.electric
    for t in periods:
        for ln in el.lines:
            lid = _line_id(ln)
            sys_.add_var(f"P[{lid},{t}]", -math.inf, math.inf, ("P", lid, t))
            sys_.add_var(f"Q[{lid},{t}]", -math.inf, math.inf, ("Q", lid, t))
            sys_.add_var(f"I[{lid},{t}]", 0.0, ln.i_max, ("I", lid, t))
        for b in el.buses:
            sys_.add_var(f"V[{b.id},{t}]", b.v_min, b.v_max, ("V", b.id, t))
            if b.generator:
                g = b.generator
                sys_.add_var(f"Pg[{b.id},{t}]", g.p_min, g.p_max, ("Pg", b.id, t))
                sys_.add_var(f"Qg[{b.id},{t}]", g.q_min, g.q_max, ("Qg", b.id, t))
        for u in case.bess:
            sys_.add_var(f"Pes[{u.id},{t}]", -math.inf, math.inf, ("Pes", u.id, t))
            sys_.add_var(f"Qes[{u.id},{t}]", -math.inf, math.inf, ("Qes", u.id, t))
            sys_.add_var(f"Les[{u.id},{t}]", 0.0, math.inf, ("Les", u.id, t))


def _add_pump_power_vars(sys_: ConstraintSystem, periods, with_reactive):
    case = sys_.case
    for t in periods:
        for pm in case.water.pumps:
            pipe = case.water.pipe(pm.pipe)
            p_cap = pm.shaft_power(pipe.f_max)
            sys_.add_var(f"Ppump[{pm.id},{t}]", 0.0, p_cap, ("Ppump", pm.id, t))
            if with_reactive:
                sys_.add_var(f"Qpump[{pm.id},{t}]", 0.0, p_cap / pm.pq_ratio,
                             ("Qpump", pm.id, t))


def _add_water_vars(sys_: ConstraintSystem, periods, dsm_nodes=()):
    case = sys_.case
    w = case.water
    for t in periods:
        for p in w.pipes:
            sys_.add_var(f"f[{p.id},{t}]", p.f_min, p.f_max, ("f", p.id, t))
        for n in w.nodes:
            sys_.add_var(f"y[{n.id},{t}]", n.y_min, n.y_max, ("y", n.id, t))
            if n.source:
                sys_.add_var(f"wg[{n.id},{t}]", n.source.w_min, n.source.w_max,
                             ("wg", n.id, t))
        for tk in w.tanks:
            if tk.owner == "utility":
                sys_.add_var(f"wut[{tk.id},{t}]", -math.inf, math.inf, ("wut", tk.id, t))
        for pm in w.pumps:
            sys_.add_var(f"ygain[{pm.id},{t}]", -math.inf, math.inf, ("ygain", pm.id, t))
            sys_.add_var(f"alpha[{pm.id},{t}]", 0.0, 1.0, ("alpha", pm.id, t), binary=True)
        for ir in w.irrigation:
            if ir.node in dsm_nodes:
                sys_.add_var(f"fct[{ir.id},{t}]", 0.0, math.inf, ("fct", ir.id, t))
                sys_.add_var(f"alpha_ir[{ir.id},{t}]", 0.0, 1.0,
                             ("alpha_ir", ir.id, t), binary=True)


def _electric_balance(sys_: ConstraintSystem, periods, pump_power="var",
                      fixed_pump=None):
    """Nodal active/reactive balances, voltage drops, and the slack pin.

    ``pump_power`` is "var" (pump draw is a decision variable), "none"
    (water side absent), or "fixed" (values from ``fixed_pump[(pump, t)]``).
    """
    case = sys_.case
    el = case.electric
    _, parent, children = el.bfs_order()
    line_by_pair = {(ln.from_bus, ln.to_bus): ln for ln in el.lines}
    line_of_child = {}
    for b in el.buses:
        par = parent.get(b.id)
        if par is None:
            continue
        ln = line_by_pair.get((par, b.id)) or line_by_pair.get((b.id, par))
        line_of_child[b.id] = ln

    for t in periods:
        for b in el.buses:
            p_terms, q_terms = [], []
            p_rhs = b.p_load[t]
            q_rhs = b.q_load[t]
            if b.pv:
                p_rhs -= b.pv.p_profile[t]
                q_rhs -= b.pv.q_profile[t]
            if b.generator:
                p_terms.append((sys_.idx("Pg", b.id, t), 1.0))
                q_terms.append((sys_.idx("Qg", b.id, t), 1.0))
            if b.bess_id:
                p_terms.append((sys_.idx("Pes", b.bess_id, t), 1.0))
                q_terms.append((sys_.idx("Qes", b.bess_id, t), 1.0))
            if b.pump_id:
                if pump_power == "var":
                    p_terms.append((sys_.idx("Ppump", b.pump_id, t), -1.0))
                    q_terms.append((sys_.idx("Qpump", b.pump_id, t), -1.0))
                elif pump_power == "fixed":
                    pm = case.pump(b.pump_id)
                    p_fix = fixed_pump[(b.pump_id, t)]
                    p_rhs += p_fix
                    q_rhs += p_fix / pm.pq_ratio
            ln = line_of_child.get(b.id)
            if ln is not None:
                lid = _line_id(ln)
                p_terms.append((sys_.idx("P", lid, t), 1.0))
                p_terms.append((sys_.idx("I", lid, t), -ln.r))
                q_terms.append((sys_.idx("Q", lid, t), 1.0))
                q_terms.append((sys_.idx("I", lid, t), -ln.x))
            for child in children[b.id]:
                cl = line_of_child[child]
                clid = _line_id(cl)
                p_terms.append((sys_.idx("P", clid, t), -1.0))
                q_terms.append((sys_.idx("Q", clid, t), -1.0))
            sys_.add_eq(p_terms, p_rhs, f"p_balance[{b.id},{t}]")
            sys_.add_eq(q_terms, q_rhs, f"q_balance[{b.id},{t}]")

        for ln in el.lines:
            lid = _line_id(ln)
            z2 = ln.r ** 2 + ln.x ** 2
            sys_.add_eq([(sys_.idx("V", ln.from_bus, t), 1.0),
                         (sys_.idx("V", ln.to_bus, t), -1.0),
                         (sys_.idx("I", lid, t), z2),
                         (sys_.idx("P", lid, t), -2.0 * ln.r),
                         (sys_.idx("Q", lid, t), -2.0 * ln.x)],
                        0.0, f"volt_drop[{lid},{t}]")
        sys_.add_eq([(sys_.idx("V", el.root, t), 1.0)], SLACK_VOLTAGE_SQ,
                    f"slack_volt[{t}]")


def _branch_caps(sys_: ConstraintSystem, periods):
    for t in periods:
        for ln in sys_.case.electric.lines:
            lid = _line_id(ln)
            sys_.add_quad([(sys_.idx("P", lid, t), 1.0), (sys_.idx("Q", lid, t), 1.0)],
                          [], ln.s_max ** 2, f"branch_cap[{lid},{t}]")


def _storage_caps_and_energy(sys_: ConstraintSystem, periods):
    case = sys_.case
    dt = case.time.dt_hours
    for u in case.bess:
        for t in periods:
            sys_.add_quad([(sys_.idx("Pes", u.id, t), 1.0),
                           (sys_.idx("Qes", u.id, t), 1.0)],
                          [], u.s_max ** 2, f"storage_cap[{u.id},{t}]")
            terms = []
            for tau in periods:
                if tau > t:
                    break
                terms.append((sys_.idx("Pes", u.id, tau), dt))
                terms.append((sys_.idx("Les", u.id, tau), dt))
            # e_init - sum (P+L) dt within [e_min, e_max]
            sys_.add_le(terms, u.e_init - u.e_min, f"storage_energy_lo[{u.id},{t}]")
            sys_.add_le([(j, -c) for j, c in terms], u.e_max - u.e_init,
                        f"storage_energy_hi[{u.id},{t}]")


def _pump_reactive_links(sys_: ConstraintSystem, periods):
    for t in periods:
        for pm in sys_.case.water.pumps:
            sys_.add_eq([(sys_.idx("Qpump", pm.id, t), 1.0),
                         (sys_.idx("Ppump", pm.id, t), -1.0 / pm.pq_ratio)],
                        0.0, f"pump_pq_link[{pm.id},{t}]")


def _mass_balance(sys_: ConstraintSystem, periods, dsm_nodes=()):
    case = sys_.case
    w = case.water
    utility_tank_at = {tk.node: tk for tk in w.tanks if tk.owner == "utility"}
    irrigation_at = {}
    for ir in w.irrigation:
        irrigation_at.setdefault(ir.node, []).append(ir)
    for t in periods:
        for n in w.nodes:
            terms = []
            for p in w.pipes:
                if p.from_node == n.id:
                    terms.append((sys_.idx("f", p.id, t), 1.0))
                elif p.to_node == n.id:
                    terms.append((sys_.idx("f", p.id, t), -1.0))
            rhs = -n.demand[t]
            if n.id in dsm_nodes:
                # the customer-tank inflow becomes a decision variable and the
                # baseline inflow profile drops out of the fixed draw
                rhs = 0.0
                for ir in irrigation_at.get(n.id, []):
                    terms.append((sys_.idx("fct", ir.id, t), 1.0))
            if n.source:
                terms.append((sys_.idx("wg", n.id, t), -1.0))
            tk = utility_tank_at.get(n.id)
            if tk is not None:
                terms.append((sys_.idx("wut", tk.id, t), 1.0))
            sys_.add_eq(terms, rhs, f"mass_balance[{n.id},{t}]")


def _tank_levels(sys_: ConstraintSystem, periods):
    case = sys_.case
    step = SECONDS_PER_HOUR * case.time.dt_hours
    for tk in case.water.tanks:
        if tk.owner != "utility":
            continue
        for t in periods:
            terms = [(sys_.idx("wut", tk.id, tau), 1.0) for tau in periods if tau <= t]
            sys_.add_le([(j, -c) for j, c in terms], (tk.s_init - tk.s_min) / step,
                        f"tank_level_lo[{tk.id},{t}]")
            sys_.add_le(terms, (tk.s_max - tk.s_init) / step,
                        f"tank_level_hi[{tk.id},{t}]")


def _pump_head_lines(sys_: ConstraintSystem, periods):
    for t in periods:
        for pm in sys_.case.water.pumps:
            sys_.add_eq([(sys_.idx("ygain", pm.id, t), 1.0),
                         (sys_.idx("f", pm.pipe, t), -pm.head_slope)],
                        pm.head_intercept, f"pump_head[{pm.id},{t}]")


def _pump_state_rows(sys_: ConstraintSystem, periods):
    """Flow gating f <= M*alpha for every pump pipe."""
    case = sys_.case
    for t in periods:
        for pm in case.water.pumps:
            m_val = big_m_value(case, pm.pipe)
            sys_.add_le([(sys_.idx("f", pm.pipe, t), 1.0),
                         (sys_.idx("alpha", pm.id, t), -m_val)],
                        0.0, f"pump_state_flow[{pm.id},{t}]")


def _pump_channel_convex(sys_: ConstraintSystem, periods):
    """Convex side of the gated pump-pipe head relation, epigraph form.

    An auxiliary variable bounds R*f^2 from above in a pure cone row so that
    the pump state binary only ever appears in linear rows.
    """
    case = sys_.case
    for t in periods:
        for pm in case.water.pumps:
            pipe = case.water.pipe(pm.pipe)
            ni, nj = case.water.node(pipe.from_node), case.water.node(pipe.to_node)
            dh = ni.elevation - nj.elevation
            m_val = big_m_value(case, pm.pipe)
            epi = sys_.add_var(f"hloss_epi[{pm.id},{t}]", 0.0,
                               pipe.r_hyd * pipe.f_max ** 2,
                               ("hloss_epi", pm.id, t))
            sys_.add_quad([(sys_.idx("f", pm.pipe, t), pipe.r_hyd)],
                          [(epi, -1.0)], 0.0, f"pump_loss_epi[{pm.id},{t}]")
            # epi <= dy + dh + ygain + M*(1-alpha)
            sys_.add_le([(epi, 1.0),
                         (sys_.idx("y", ni.id, t), -1.0),
                         (sys_.idx("y", nj.id, t), 1.0),
                         (sys_.idx("ygain", pm.id, t), -1.0),
                         (sys_.idx("alpha", pm.id, t), m_val)],
                        dh + m_val, f"pump_loss_cap[{pm.id},{t}]")
            # dy + dh + ygain + M*(alpha-1) <= R*f_max*f  (chord upper bound)
            sys_.add_le([(sys_.idx("y", ni.id, t), 1.0),
                         (sys_.idx("y", nj.id, t), -1.0),
                         (sys_.idx("ygain", pm.id, t), 1.0),
                         (sys_.idx("alpha", pm.id, t), m_val),
                         (sys_.idx("f", pm.pipe, t), -pipe.r_hyd * pipe.f_max)],
                        -dh + m_val, f"pump_channel_upper[{pm.id},{t}]")


def _pump_channel_exact(sys_: ConstraintSystem, periods):
    """Exact gated head relation: convex quad side plus concave-side record."""
    case = sys_.case
    for t in periods:
        for pm in case.water.pumps:
            pipe = case.water.pipe(pm.pipe)
            ni, nj = case.water.node(pipe.from_node), case.water.node(pipe.to_node)
            dh = ni.elevation - nj.elevation
            m_val = big_m_value(case, pm.pipe)
            # R*f^2 <= dy + dh + ygain + M*(1-alpha)
            sys_.add_quad([(sys_.idx("f", pm.pipe, t), pipe.r_hyd)],
                          [(sys_.idx("y", ni.id, t), -1.0),
                           (sys_.idx("y", nj.id, t), 1.0),
                           (sys_.idx("ygain", pm.id, t), -1.0),
                           (sys_.idx("alpha", pm.id, t), m_val)],
                          dh + m_val, f"pump_loss_cap[{pm.id},{t}]")
            sys_.nonconvex.append(NonconvexRecord(
                "pump_channel",
                {"f": sys_.idx("f", pm.pipe, t),
                 "y_i": sys_.idx("y", ni.id, t), "y_j": sys_.idx("y", nj.id, t),
                 "ygain": sys_.idx("ygain", pm.id, t),
                 "alpha": sys_.idx("alpha", pm.id, t)},
                {"dh": dh, "r_hyd": pipe.r_hyd, "big_m": m_val},
                f"pump_channel[{pm.id},{t}]"))


def _normal_pipe_envelopes(sys_: ConstraintSystem, periods):
    """Envelope rows replacing the signed loss equality on pump-free pipes."""
    case = sys_.case
    pump_pipes = {pm.pipe for pm in case.water.pumps}
    for p in case.water.pipes:
        if p.id in pump_pipes:
            continue
        ni, nj = case.water.node(p.from_node), case.water.node(p.to_node)
        dh = ni.elevation - nj.elevation
        if p.f_min < 0.0 < p.f_max:
            poly = pipe_polygon(p.r_hyd, p.f_min, p.f_max)
            for t in periods:
                yi, yj, fk = (sys_.idx("y", ni.id, t), sys_.idx("y", nj.id, t),
                              sys_.idx("f", p.id, t))
                for w, plane in enumerate(poly.planes):
                    if plane.sense == "le":
                        sys_.add_le([(yi, 1.0), (yj, -1.0), (fk, -plane.slope)],
                                    plane.intercept - dh,
                                    f"pipe_drop_upper[{p.id},{t},{w}]")
                    else:
                        sys_.add_le([(yi, -1.0), (yj, 1.0), (fk, plane.slope)],
                                    dh - plane.intercept,
                                    f"pipe_drop_lower[{p.id},{t},{w}]")
        else:
            _one_way_pipe_envelope(sys_, p, dh, periods)


def _one_way_pipe_envelope(sys_: ConstraintSystem, p: Pipe, dh, periods):
    """Parabola/chord pair for pipes whose flow never changes sign."""
    case = sys_.case
    ni, nj = p.from_node, p.to_node
    if p.f_min >= 0.0:
        lo, hi, flip = p.f_min, p.f_max, 1.0
    else:
        # always-reverse pipe: mirror to the forward orientation
        lo, hi, flip = -p.f_max, -p.f_min, -1.0
    if lo == 0.0:
        chord = parabola_secant(p.r_hyd, hi)
        slope, intercept = chord.slope, chord.intercept
    else:
        slope = p.r_hyd * (lo + hi)
        intercept = -p.r_hyd * lo * hi
    for t in periods:
        yi, yj, fk = sys_.idx("y", ni, t), sys_.idx("y", nj, t), sys_.idx("f", p.id, t)
        s_i, s_j = flip, -flip
        # R*f^2 <= dy + dh (oriented)
        sys_.add_quad([(fk, p.r_hyd)],
                      [(yi, -s_i), (yj, -s_j)], flip * dh,
                      f"pipe_drop_lower[{p.id},{t}]")
        # dy + dh <= chord(f)
        sys_.add_le([(yi, s_i), (yj, s_j), (fk, -flip * slope)],
                    intercept - flip * dh, f"pipe_drop_upper[{p.id},{t}]")


def _normal_pipe_records(sys_: ConstraintSystem, periods):
    case = sys_.case
    pump_pipes = {pm.pipe for pm in case.water.pumps}
    for p in case.water.pipes:
        if p.id in pump_pipes:
            continue
        ni, nj = case.water.node(p.from_node), case.water.node(p.to_node)
        for t in periods:
            sys_.nonconvex.append(NonconvexRecord(
                "pipe_loss",
                {"f": sys_.idx("f", p.id, t),
                 "y_i": sys_.idx("y", ni.id, t), "y_j": sys_.idx("y", nj.id, t)},
                {"dh": ni.elevation - nj.elevation, "r_hyd": p.r_hyd},
                f"pipe_loss[{p.id},{t}]"))


def _pump_power_envelopes(sys_: ConstraintSystem, periods):
    case = sys_.case
    for t in periods:
        for pm in case.water.pumps:
            pipe = case.water.pipe(pm.pipe)
            hull = pump_power_hull(pm.power_quad, pm.power_lin, pipe.f_max,
                                   pm.efficiency)
            fk = sys_.idx("f", pm.pipe, t)
            pk = sys_.idx("Ppump", pm.id, t)
            sys_.add_quad([(fk, hull.quad)],
                          [(fk, hull.lin), (pk, -pm.efficiency)], 0.0,
                          f"pump_power_lower[{pm.id},{t}]")
            sys_.add_le([(pk, pm.efficiency), (fk, -hull.secant_slope)], 0.0,
                        f"pump_power_upper[{pm.id},{t}]")


def _pump_power_records(sys_: ConstraintSystem, periods):
    case = sys_.case
    for t in periods:
        for pm in case.water.pumps:
            sys_.nonconvex.append(NonconvexRecord(
                "pump_power",
                {"f": sys_.idx("f", pm.pipe, t), "p_pump": sys_.idx("Ppump", pm.id, t)},
                {"eta": pm.efficiency, "a1": pm.power_quad, "a0": pm.power_lin},
                f"pump_power[{pm.id},{t}]"))


def _branch_coupling_hulls(sys_: ConstraintSystem, periods):
    """Envelope of P^2+Q^2 = V*I per line, within the branch/current/volt box."""
    case = sys_.case
    for ln in case.electric.lines:
        lid = _line_id(ln)
        sending = case.electric.bus(ln.from_bus)
        spec = HullSpec(a=1.0, b=1.0, c=ln.s_max ** 2,
                        x3_min=sending.v_min, x3_max=sending.v_max,
                        x4_min=0.0, x4_max=ln.i_max)
        block = hull_constraints(spec)
        for t in periods:
            pi, qi = sys_.idx("P", lid, t), sys_.idx("Q", lid, t)
            vi, ii = sys_.idx("V", ln.from_bus, t), sys_.idx("I", lid, t)
            sys_.add_rcone(1.0, pi, 1.0, qi, vi, ii, f"branch_coupling[{lid},{t}]")
            sys_.add_le([(vi, block.dcut.k1), (ii, block.dcut.k2)], block.dcut.d,
                        f"branch_cut[{lid},{t}]")
            for w, cut in enumerate(block.cuts):
                sys_.add_quad([(qi, cut.q2)], [(vi, cut.k3), (ii, cut.k4)], cut.rhs,
                              f"branch_side_cut[{lid},{t},{w}]")
        # the disc part of the block is the branch cap row, added separately


def _storage_loss_hulls(sys_: ConstraintSystem, periods):
    case = sys_.case
    for u in case.bess:
        bus = case.electric.bus(u.bus)
        a, b = u.r_batt + u.r_cvt, u.r_cvt
        spec = HullSpec(a=a, b=b, c=u.s_max ** 2,
                        x3_min=bus.v_min, x3_max=bus.v_max,
                        x4_min=0.0, x4_max=math.inf)
        block = hull_constraints(spec)
        for t in periods:
            pi, qi = sys_.idx("Pes", u.id, t), sys_.idx("Qes", u.id, t)
            vi, li = sys_.idx("V", u.bus, t), sys_.idx("Les", u.id, t)
            if a > 0:
                sys_.add_rcone(a, pi, b, qi, li, vi, f"storage_loss[{u.id},{t}]")
            sys_.add_le([(vi, block.dcut.k1), (li, block.dcut.k2)], block.dcut.d,
                        f"storage_cut_v[{u.id},{t}]")
            for w, cut in enumerate(block.cuts):
                sys_.add_quad([(qi, cut.q2)], [(vi, cut.k3), (li, cut.k4)], cut.rhs,
                              f"storage_cut_q[{u.id},{t},{w}]")


def _branch_coupling_records(sys_: ConstraintSystem, periods):
    case = sys_.case
    for t in periods:
        for ln in case.electric.lines:
            lid = _line_id(ln)
            sys_.nonconvex.append(NonconvexRecord(
                "branch_coupling",
                {"p": sys_.idx("P", lid, t), "q": sys_.idx("Q", lid, t),
                 "v": sys_.idx("V", ln.from_bus, t), "i": sys_.idx("I", lid, t)},
                {}, f"branch_coupling[{lid},{t}]"))
        for u in case.bess:
            sys_.nonconvex.append(NonconvexRecord(
                "storage_loss",
                {"p": sys_.idx("Pes", u.id, t), "q": sys_.idx("Qes", u.id, t),
                 "loss": sys_.idx("Les", u.id, t), "v": sys_.idx("V", u.bus, t)},
                {"a": u.r_batt + u.r_cvt, "b": u.r_cvt},
                f"storage_loss[{u.id},{t}]"))


def _energy_cost_objective(sys_: ConstraintSystem, periods):
    case = sys_.case
    dt = case.time.dt_hours
    root = case.electric.root
    for t in periods:
        for b in case.electric.buses:
            if not b.generator:
                continue
            pg = sys_.idx("Pg", b.id, t)
            if b.id == root:
                sys_.add_obj(pg, lin=case.prices[t] * dt)
            else:
                sys_.add_obj(pg, lin=b.generator.c1 * dt, quad=b.generator.c2 * dt)


def _require_root_generator(case: NexusCase):
    root = case.electric.bus(case.electric.root)
    if root.generator is None:
        raise BuildError(f"root bus {case.electric.root} needs a generator entry "
                         "(the grid interface)")


def _irrigation_rows(sys_: ConstraintSystem, periods):
    case = sys_.case
    step = SECONDS_PER_HOUR * case.time.dt_hours
    tank_at = {tk.node: tk for tk in case.water.tanks if tk.owner == "customer"}
    for ir in case.water.irrigation:
        tk = tank_at[ir.node]
        budget = [(sys_.idx("alpha_ir", ir.id, t), 1.0) for t in periods]
        sys_.add_eq(budget, float(ir.hours_on), f"irrigation_budget[{ir.id}]")
        for t in periods:
            terms, draw = [], 0.0
            for tau in periods:
                if tau > t:
                    break
                terms.append((sys_.idx("fct", ir.id, tau), 1.0))
                terms.append((sys_.idx("alpha_ir", ir.id, tau), -ir.rate))
                draw += ir.demand_draw[tau]
            sys_.add_le(terms, (tk.s_max - tk.s_init) / step + draw,
                        f"irrigation_level_hi[{ir.id},{t}]")
            sys_.add_le([(j, -c) for j, c in terms], (tk.s_init - tk.s_min) / step - draw,
                        f"irrigation_level_lo[{ir.id},{t}]")


# ---------------------------------------------------------------------------
# the four builders
# ---------------------------------------------------------------------------

def build_micp(case: NexusCase) -> ConstraintSystem:
    """Mixed-integer convex relaxation of the coupled scheduling problem."""
    _require_root_generator(case)
    periods = range(case.time.periods)
    sys_ = ConstraintSystem(case, "micp")
    _add_electric_vars(sys_, periods)
    _add_pump_power_vars(sys_, periods, with_reactive=True)
    _add_water_vars(sys_, periods)
    _electric_balance(sys_, periods, pump_power="var")
    _branch_caps(sys_, periods)
    _storage_caps_and_energy(sys_, periods)
    _pump_reactive_links(sys_, periods)
    _mass_balance(sys_, periods)
    _tank_levels(sys_, periods)
    _pump_head_lines(sys_, periods)
    _pump_state_rows(sys_, periods)
    _pump_channel_convex(sys_, periods)
    _normal_pipe_envelopes(sys_, periods)
    _pump_power_envelopes(sys_, periods)
    _branch_coupling_hulls(sys_, periods)
    _storage_loss_hulls(sys_, periods)
    _energy_cost_objective(sys_, periods)
    return sys_


def build_minlp(case: NexusCase) -> ConstraintSystem:
    """Exact mixed-integer nonlinear model (evaluable, not cone-solvable)."""
    _require_root_generator(case)
    periods = range(case.time.periods)
    sys_ = ConstraintSystem(case, "minlp")
    _add_electric_vars(sys_, periods)
    _add_pump_power_vars(sys_, periods, with_reactive=True)
    _add_water_vars(sys_, periods)
    _electric_balance(sys_, periods, pump_power="var")
    _branch_caps(sys_, periods)
    _storage_caps_and_energy(sys_, periods)
    _pump_reactive_links(sys_, periods)
    _mass_balance(sys_, periods)
    _tank_levels(sys_, periods)
    _pump_head_lines(sys_, periods)
    _pump_state_rows(sys_, periods)
    _pump_channel_exact(sys_, periods)
    _normal_pipe_records(sys_, periods)
    _pump_power_records(sys_, periods)
    _branch_coupling_records(sys_, periods)
    _energy_cost_objective(sys_, periods)
    return sys_


def build_dsm(case: NexusCase) -> ConstraintSystem:
    """Relaxation plus flexible irrigation (customer-tank inflow decided)."""
    if not case.water.irrigation:
        raise BuildError("flexible-irrigation variant needs at least one irrigation load")
    _require_root_generator(case)
    periods = range(case.time.periods)
    dsm_nodes = {ir.node for ir in case.water.irrigation}
    sys_ = ConstraintSystem(case, "dsm")
    _add_electric_vars(sys_, periods)
    _add_pump_power_vars(sys_, periods, with_reactive=True)
    _add_water_vars(sys_, periods, dsm_nodes=dsm_nodes)
    _electric_balance(sys_, periods, pump_power="var")
    _branch_caps(sys_, periods)
    _storage_caps_and_energy(sys_, periods)
    _pump_reactive_links(sys_, periods)
    _mass_balance(sys_, periods, dsm_nodes=dsm_nodes)
    _tank_levels(sys_, periods)
    _pump_head_lines(sys_, periods)
    _pump_state_rows(sys_, periods)
    _pump_channel_convex(sys_, periods)
    _normal_pipe_envelopes(sys_, periods)
    _pump_power_envelopes(sys_, periods)
    _branch_coupling_hulls(sys_, periods)
    _storage_loss_hulls(sys_, periods)
    _irrigation_rows(sys_, periods)
    _energy_cost_objective(sys_, periods)
    return sys_


def build_water_stage(case: NexusCase) -> ConstraintSystem:
    """Water-only pump scheduling minimizing total pumping power."""
    periods = range(case.time.periods)
    sys_ = ConstraintSystem(case, "water_stage1")
    _add_pump_power_vars(sys_, periods, with_reactive=False)
    _add_water_vars(sys_, periods)
    _mass_balance(sys_, periods)
    _tank_levels(sys_, periods)
    _pump_head_lines(sys_, periods)
    _pump_state_rows(sys_, periods)
    _pump_channel_convex(sys_, periods)
    _normal_pipe_envelopes(sys_, periods)
    _pump_power_envelopes(sys_, periods)
    dt = case.time.dt_hours
    for t in periods:
        for pm in case.water.pumps:
            sys_.add_obj(sys_.idx("Ppump", pm.id, t), lin=dt)
    return sys_


def build_electric_stage(case: NexusCase, pump_schedule: dict) -> ConstraintSystem:
    """Electric-only dispatch with pump draws fixed per (pump id, period)."""
    _require_root_generator(case)
    periods = range(case.time.periods)
    sys_ = ConstraintSystem(case, "electric_stage2")
    _add_electric_vars(sys_, periods)
    _electric_balance(sys_, periods, pump_power="fixed", fixed_pump=pump_schedule)
    _branch_caps(sys_, periods)
    _storage_caps_and_energy(sys_, periods)
    _branch_coupling_hulls(sys_, periods)
    _storage_loss_hulls(sys_, periods)
    _energy_cost_objective(sys_, periods)
    return sys_


def build_independent(case: NexusCase):
    """Two-stage baseline: (stage-1 system, stage-2 builder on its schedule)."""
    stage1 = build_water_stage(case)

    def stage2_from_schedule(pump_schedule: dict) -> ConstraintSystem:
        return build_electric_stage(case, pump_schedule)

    return stage1, stage2_from_schedule


def pump_schedule_from_solution(case: NexusCase, sys_: ConstraintSystem, x) -> dict:
    """Extract the (pump id, period) -> power map the second stage consumes."""
    return {(pm.id, t): float(x[sys_.idx("Ppump", pm.id, t)])
            for pm in case.water.pumps for t in range(case.time.periods)}


def dump_system_json(sys_: ConstraintSystem, path):
    with open(path, "w") as fh:
        json.dump(sys_.to_json_dict(), fh, indent=2, sort_keys=True)

"""Exact nonlinear physics: hydraulic and radial power-flow solvers, plus the
exactness report that measures how faithfully a relaxed optimum satisfies the
original nonconvex relations.

``hydraulic_solve`` runs damped Newton iterations on nodal mass balance with
signed quadratic losses and affine pump head gain.  ``distflow_solve`` runs a
backward/forward sweep on the radial grid in squared voltage/current
variables.  ``exactness`` combines both into per-relation residuals and a
recovered exact state: flows fix the physics, so heads/voltages/losses left
indeterminate by the relaxation are re-solved and, when the result stays
feasible with the same cost, adopted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SolveError
from .formulation import ConstraintSystem, build_minlp
from .network import NexusCase, WaterNetwork, ElectricNetwork

FLOW_REG = 1e-6          # |f| below this uses a linearized loss (Jacobian safety)
SLACK_V_DEFAULT = 1.0    # squared voltage at the root bus


def _loss(r_hyd, f):
    if abs(f) < FLOW_REG:
        return r_hyd * FLOW_REG * f
    return r_hyd * abs(f) * f


def _dloss(r_hyd, f):
    if abs(f) < FLOW_REG:
        return r_hyd * FLOW_REG
    return 2.0 * r_hyd * abs(f)


@dataclass
class HydraulicState:
    flows: dict
    heads: dict
    source_injections: dict
    iterations: int
    residual: float


def hydraulic_solve(water: WaterNetwork, pump_on: dict, draws: dict,
                    fallback_heads: dict | None = None,
                    tol: float = 1e-8, max_iter: int = 60) -> HydraulicState:
    """Exact flows and pressure heads for given pump states and nodal draws.

    ``pump_on`` maps pump id to a truthy running state; pipes of stopped
    pumps are closed (zero flow).  ``draws`` maps node id to the outflow
    taken from the network (m^3/s); source nodes supply the balance and
    their heads are pinned.  Sections isolated by stopped pumps keep the
    ``fallback_heads`` values (they have no head reference); isolated
    sections with nonzero draws are unservable and raise.
    """
    on_for_pipe = {}
    for pm in water.pumps:
        on_for_pipe[pm.pipe] = bool(pump_on.get(pm.id, False))
    active = [p for p in water.pipes if on_for_pipe.get(p.id, True)]
    sources = {n.id for n in water.nodes if n.source}
    fixed_head = {n.id: n.y_min for n in water.nodes if n.source}

    # connected components over active pipes; each needs a head reference
    comp = {n.id: n.id for n in water.nodes}

    def find(a):
        while comp[a] != a:
            comp[a] = comp[comp[a]]
            a = comp[a]
        return a

    for p in active:
        ra, rb = find(p.from_node), find(p.to_node)
        if ra != rb:
            comp[ra] = rb
    comp_of = {n.id: find(n.id) for n in water.nodes}
    anchored = {comp_of[s] for s in sources}
    heads = dict(fixed_head)
    for n in water.nodes:
        if comp_of[n.id] not in anchored:
            if abs(draws.get(n.id, 0.0)) > tol:
                raise SolveError(
                    f"node {n.id} is isolated by stopped pumps but draws "
                    f"{draws.get(n.id, 0.0):.3g} m^3/s"
                )
            fb = (fallback_heads or {}).get(n.id)
            heads[n.id] = fb if fb is not None else 0.5 * (n.y_min + n.y_max)

    live_nodes = [n for n in water.nodes
                  if comp_of[n.id] in anchored and n.id not in sources]
    live_pipes = [p for p in active if comp_of[p.from_node] in anchored]
    pump_by_pipe = {pm.pipe: pm for pm in water.pumps}
    nf = len(live_pipes)
    ny = len(live_nodes)
    node_pos = {n.id: nf + k for k, n in enumerate(live_nodes)}
    elev = {n.id: n.elevation for n in water.nodes}

    flows = {p.id: 0.0 for p in water.pipes}
    if nf == 0:
        for n in live_nodes:
            heads[n.id] = 0.5 * (n.y_min + n.y_max)
        return HydraulicState(flows, heads,
                              {s: draws.get(s, 0.0) for s in sources}, 0, 0.0)

    # initial flows from (least-squares) mass balance, heads from bounds
    a_rows = np.zeros((ny, nf))
    rhs = np.zeros(ny)
    for r, n in enumerate(live_nodes):
        rhs[r] = -draws.get(n.id, 0.0)
        for k, p in enumerate(live_pipes):
            if p.from_node == n.id:
                a_rows[r, k] = 1.0
            elif p.to_node == n.id:
                a_rows[r, k] = -1.0
    f0 = np.linalg.lstsq(a_rows, rhs, rcond=None)[0] if ny else np.zeros(nf)
    u = np.concatenate([f0, [heads.get(n.id, 0.5 * (n.y_min + n.y_max))
                             if n.id in heads else 0.5 * (n.y_min + n.y_max)
                             for n in live_nodes]])

    def head_of(nid, u_vec):
        return fixed_head[nid] if nid in fixed_head else u_vec[node_pos[nid]]

    def residual_vec(u_vec):
        res = np.zeros(nf + ny)
        for k, p in enumerate(live_pipes):
            f = u_vec[k]
            yi = head_of(p.from_node, u_vec)
            yj = head_of(p.to_node, u_vec)
            dh = elev[p.from_node] - elev[p.to_node]
            pm = pump_by_pipe.get(p.id)
            if pm is None:
                res[k] = yi - yj + dh - _loss(p.r_hyd, f)
            else:
                res[k] = yi - yj + dh + pm.head_gain(f) - p.r_hyd * f * f
        for r, n in enumerate(live_nodes):
            acc = draws.get(n.id, 0.0)
            for k, p in enumerate(live_pipes):
                if p.from_node == n.id:
                    acc += u_vec[k]
                elif p.to_node == n.id:
                    acc -= u_vec[k]
            res[nf + r] = acc
        return res

    res = residual_vec(u)
    it = 0
    for it in range(1, max_iter + 1):
        if np.abs(res).max() <= tol:
            break
        jac = np.zeros((nf + ny, nf + ny))
        for k, p in enumerate(live_pipes):
            f = u[k]
            pm = pump_by_pipe.get(p.id)
            jac[k, k] = (pm.head_slope - 2.0 * p.r_hyd * f) if pm is not None \
                else -_dloss(p.r_hyd, f)
            if p.from_node in node_pos:
                jac[k, node_pos[p.from_node]] = 1.0
            if p.to_node in node_pos:
                jac[k, node_pos[p.to_node]] = -1.0
        for r, n in enumerate(live_nodes):
            for k, p in enumerate(live_pipes):
                if p.from_node == n.id:
                    jac[nf + r, k] = 1.0
                elif p.to_node == n.id:
                    jac[nf + r, k] = -1.0
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -res, rcond=None)[0]
        # damped update: keep the residual norm non-increasing
        base = np.linalg.norm(res)
        scale = 1.0
        for _ in range(30):
            cand = u + scale * step
            cres = residual_vec(cand)
            if np.linalg.norm(cres) < base or scale < 1e-6:
                u, res = cand, cres
                break
            scale *= 0.5
    else:
        raise SolveError(
            f"hydraulic iteration stalled: residual {np.abs(res).max():.3e} "
            f"after {max_iter} steps"
        )
    if np.abs(res).max() > tol:
        raise SolveError(f"hydraulic iteration stalled at residual {np.abs(res).max():.3e}")

    for k, p in enumerate(live_pipes):
        flows[p.id] = float(u[k])
    for n in live_nodes:
        heads[n.id] = float(u[node_pos[n.id]])
    injections = {}
    for s in sources:
        acc = draws.get(s, 0.0)
        for p in live_pipes:
            if p.from_node == s:
                acc += flows[p.id]
            elif p.to_node == s:
                acc -= flows[p.id]
        injections[s] = float(acc)
    return HydraulicState(flows, heads, injections, it, float(np.abs(res).max()))


@dataclass
class DistflowState:
    p: dict               # sending-end active power per line id
    q: dict
    i: dict               # squared current per line id
    v: dict               # squared voltage per bus id
    root_p: float         # net injection required at the root
    root_q: float
    iterations: int
    residual: float


def distflow_solve(electric: ElectricNetwork, inj_p: dict, inj_q: dict,
                   v_root: float = SLACK_V_DEFAULT,
                   tol: float = 1e-10, max_iter: int = 200) -> DistflowState:
    """Backward/forward sweep to the exact branch-flow fixed point.

    ``inj_p``/``inj_q`` give net injections (generation minus load) at every
    non-root bus.  Returns the exact squared-variable state and the injection
    the root must supply.  Raises when the sweep diverges, which signals that
    the loading has no high-voltage solution.
    """
    order, parent, children = electric.bfs_order()
    lines = {}
    for ln in electric.lines:
        lines[(ln.from_bus, ln.to_bus)] = ln
        lines[(ln.to_bus, ln.from_bus)] = ln

    def line_id(ln):
        return f"{ln.from_bus}-{ln.to_bus}"

    p = {line_id(ln): 0.0 for ln in electric.lines}
    q = dict(p)
    curr = dict(p)
    v = {b: v_root for b in order}

    def line_for(child):
        return lines[(parent[child], child)]

    res = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        # backward: accumulate flows leaf-to-root with current loss estimates
        for bus in reversed(order):
            if parent.get(bus) is None:
                continue
            ln = line_for(bus)
            lid = line_id(ln)
            acc_p = -inj_p.get(bus, 0.0)
            acc_q = -inj_q.get(bus, 0.0)
            for ch in children[bus]:
                cl = line_for(ch)
                acc_p += p[line_id(cl)]
                acc_q += q[line_id(cl)]
            p[lid] = acc_p + ln.r * curr[lid]
            q[lid] = acc_q + ln.x * curr[lid]
        # currents from sending-end voltages, then forward voltage update
        for bus in order:
            for ch in children[bus]:
                ln = line_for(ch)
                lid = line_id(ln)
                curr[lid] = (p[lid] ** 2 + q[lid] ** 2) / v[bus]
                v[ch] = (v[bus] - 2.0 * (ln.r * p[lid] + ln.x * q[lid])
                         + (ln.r ** 2 + ln.x ** 2) * curr[lid])
                if v[ch] <= 0:
                    raise SolveError(
                        f"voltage collapsed at bus {ch}: the loading admits no "
                        "physical operating point"
                    )
        # exact-equation residuals
        res = 0.0
        for bus in order:
            if parent.get(bus) is None:
                continue
            ln = line_for(bus)
            lid = line_id(ln)
            bal_p = -inj_p.get(bus, 0.0) + ln.r * curr[lid] - p[lid]
            bal_q = -inj_q.get(bus, 0.0) + ln.x * curr[lid] - q[lid]
            for ch in children[bus]:
                bal_p += p[line_id(line_for(ch))]
                bal_q += q[line_id(line_for(ch))]
            res = max(res, abs(bal_p), abs(bal_q))
            res = max(res, abs(p[lid] ** 2 + q[lid] ** 2 - v[parent[bus]] * curr[lid]))
            res = max(res, abs(v[parent[bus]] - v[bus]
                               + (ln.r ** 2 + ln.x ** 2) * curr[lid]
                               - 2.0 * (ln.r * p[lid] + ln.x * q[lid])))
        if res <= tol:
            break
    else:
        raise SolveError(f"power-flow sweep did not reach {tol:.1e} "
                         f"(residual {res:.3e}); loading may be infeasible")

    root = electric.root
    root_p = sum(p[line_id(line_for(ch))] for ch in children[root])
    root_q = sum(q[line_id(line_for(ch))] for ch in children[root])
    return DistflowState(p, q, curr, v, root_p, root_q, it, res)


# ---------------------------------------------------------------------------
# exactness measurement and state recovery
# ---------------------------------------------------------------------------

@dataclass
class ExactnessReport:
    epsilon: float
    exact: bool
    max_residual: float
    worst: dict
    per_period: dict                     # kind -> [max residual per period]
    recovery: dict = field(default_factory=dict)
    recovered_values: np.ndarray | None = None

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "exact": self.exact,
            "max_residual": self.max_residual,
            "worst": self.worst,
            "per_period": self.per_period,
            "recovery": {k: v for k, v in self.recovery.items() if k != "values"},
        }


def transfer_values(x, sys_from: ConstraintSystem, sys_to: ConstraintSystem):
    """Vector for ``sys_to`` with values copied by variable key."""
    out = np.zeros(sys_to.n_vars)
    for key, j in sys_to._index.items():
        if sys_from.has(*key):
            out[j] = x[sys_from.idx(*key)]
        else:
            raise KeyError(f"variable {key} missing from source system")
    return out


def _period_of(label):
    return int(label.rsplit(",", 1)[1].rstrip("]"))


def exact_residuals(x, system: ConstraintSystem, minlp: ConstraintSystem):
    """Per-record residuals of the exact relations, evaluated at ``x``."""
    xm = transfer_values(x, system, minlp)
    t_count = system.case.time.periods
    per = {}
    worst = {"value": 0.0, "label": None}
    for rec in minlp.nonconvex:
        val = rec.residual(xm)
        val = abs(val) if rec.kind != "pump_channel" else max(0.0, val)
        row = per.setdefault(rec.kind, [0.0] * t_count)
        t = _period_of(rec.label)
        row[t] = max(row[t], val)
        if val > worst["value"]:
            worst = {"value": val, "label": rec.label}
    return per, worst


def recover_state(x, system: ConstraintSystem, feas_tol: float = 1e-6):
    """Re-solve the exact physics under the solution's decisions.

    Pump states, storage set-points, tank/irrigation draws, and non-root
    generator outputs stay as decided; heads, voltages, line flows, storage
    losses, pump powers, and the root injection are replaced by the exact
    solution.  Returns ``(values, info)``; ``info['accepted']`` is True when
    the recovered state satisfies the relaxed system within ``feas_tol`` (the
    envelopes hold by construction, so only bound/limit violations reject).
    """
    case = system.case
    water, el = case.water, case.electric
    xr = x.copy()
    t_count = case.time.periods
    dsm_nodes = {ir.node: ir for ir in water.irrigation
                 if system.has("fct", ir.id, 0)}
    utility_tank_at = {tk.node: tk for tk in water.tanks if tk.owner == "utility"}
    deltas = {"y": 0.0, "f": 0.0, "v": 0.0, "i": 0.0}
    info = {"accepted": False, "max_violation": math.inf, "objective_drift": 0.0}

    for t in range(t_count):
        draws = {}
        for n in water.nodes:
            d = n.demand[t]
            if n.id in dsm_nodes:
                d = x[system.idx("fct", dsm_nodes[n.id].id, t)]
            tk = utility_tank_at.get(n.id)
            if tk is not None:
                d += x[system.idx("wut", tk.id, t)]
            if d:
                draws[n.id] = d
        pump_on = {pm.id: x[system.idx("alpha", pm.id, t)] > 0.5 for pm in water.pumps}
        fallback = {n.id: x[system.idx("y", n.id, t)] for n in water.nodes}
        hyd = hydraulic_solve(water, pump_on, draws, fallback_heads=fallback)
        for n in water.nodes:
            j = system.idx("y", n.id, t)
            deltas["y"] = max(deltas["y"], abs(xr[j] - hyd.heads[n.id]))
            xr[j] = hyd.heads[n.id]
            if n.source:
                xr[system.idx("wg", n.id, t)] = hyd.source_injections[n.id]
        for p in water.pipes:
            j = system.idx("f", p.id, t)
            deltas["f"] = max(deltas["f"], abs(xr[j] - hyd.flows[p.id]))
            xr[j] = hyd.flows[p.id]
        for pm in water.pumps:
            f = hyd.flows[pm.pipe]
            xr[system.idx("ygain", pm.id, t)] = pm.head_gain(f)
            p_pump = pm.shaft_power(f) if pump_on[pm.id] else 0.0
            xr[system.idx("Ppump", pm.id, t)] = p_pump
            if system.has("Qpump", pm.id, t):
                xr[system.idx("Qpump", pm.id, t)] = p_pump / pm.pq_ratio
            if system.has("hloss_epi", pm.id, t):
                pipe = water.pipe(pm.pipe)
                xr[system.idx("hloss_epi", pm.id, t)] = pipe.r_hyd * f * f

        if any(system.has("P", f"{ln.from_bus}-{ln.to_bus}", t) for ln in el.lines):
            inj_p, inj_q = {}, {}
            pump_at_bus = {pm.bus: pm for pm in water.pumps}
            for b in el.buses:
                if b.id == el.root:
                    continue
                pp = -b.p_load[t]
                qq = -b.q_load[t]
                if b.pv:
                    pp += b.pv.p_profile[t]
                    qq += b.pv.q_profile[t]
                if b.generator:
                    pp += x[system.idx("Pg", b.id, t)]
                    qq += x[system.idx("Qg", b.id, t)]
                if b.bess_id:
                    pp += x[system.idx("Pes", b.bess_id, t)]
                    qq += x[system.idx("Qes", b.bess_id, t)]
                pm = pump_at_bus.get(b.id)
                if pm is not None:
                    pp -= xr[system.idx("Ppump", pm.id, t)]
                    qq -= xr[system.idx("Qpump", pm.id, t)]
                inj_p[b.id] = pp
                inj_q[b.id] = qq
            flow = distflow_solve(el, inj_p, inj_q, v_root=SLACK_V_DEFAULT)
            for b in el.buses:
                j = system.idx("V", b.id, t)
                deltas["v"] = max(deltas["v"], abs(xr[j] - flow.v[b.id]))
                xr[j] = flow.v[b.id]
            for ln in el.lines:
                lid = f"{ln.from_bus}-{ln.to_bus}"
                deltas["i"] = max(deltas["i"], abs(xr[system.idx("I", lid, t)] - flow.i[lid]))
                xr[system.idx("P", lid, t)] = flow.p[lid]
                xr[system.idx("Q", lid, t)] = flow.q[lid]
                xr[system.idx("I", lid, t)] = flow.i[lid]
            root = el.bus(el.root)
            rp, rq = flow.root_p, flow.root_q
            rp += root.p_load[t]
            rq += root.q_load[t]
            if root.pv:
                rp -= root.pv.p_profile[t]
                rq -= root.pv.q_profile[t]
            if root.bess_id:
                rp -= x[system.idx("Pes", root.bess_id, t)]
                rq -= x[system.idx("Qes", root.bess_id, t)]
            pm = pump_at_bus.get(root.id)
            if pm is not None:
                rp += xr[system.idx("Ppump", pm.id, t)]
                rq += xr[system.idx("Qpump", pm.id, t)]
            xr[system.idx("Pg", root.id, t)] = rp
            xr[system.idx("Qg", root.id, t)] = rq
            for u in case.bess:
                v_bus = flow.v[u.bus]
                pes = x[system.idx("Pes", u.id, t)]
                qes = x[system.idx("Qes", u.id, t)]
                xr[system.idx("Les", u.id, t)] = ((u.r_batt + u.r_cvt) * pes ** 2
                                                  + u.r_cvt * qes ** 2) / v_bus

    info["max_violation"] = system.max_violation(xr)
    info["objective_drift"] = system.objective_value(xr) - system.objective_value(x)
    info["max_delta"] = deltas
    info["accepted"] = info["max_violation"] <= feas_tol
    return xr, info


def exactness(x, system: ConstraintSystem, minlp: ConstraintSystem | None = None,
              eps: float = 1e-5, recover: bool = True,
              feas_tol: float = 1e-6) -> ExactnessReport:
    """Measure the solution against the exact nonconvex relations.

    Residuals are evaluated at the given values; when ``recover`` is set the
    report also carries the re-solved exact state and whether it could be
    adopted (feasible for the relaxation, cost preserved).
    """
    if minlp is None:
        minlp = build_minlp(system.case)
    per, worst = exact_residuals(x, system, minlp)
    max_res = worst["value"]
    report = ExactnessReport(
        epsilon=eps, exact=bool(max_res <= eps), max_residual=float(max_res),
        worst=worst, per_period=per,
    )
    if recover:
        try:
            xr, info = recover_state(x, system, feas_tol=feas_tol)
        except SolveError as exc:
            report.recovery = {"accepted": False, "error": str(exc)}
        else:
            rec_per, rec_worst = exact_residuals(xr, system, minlp)
            info["max_residual"] = rec_worst["value"]
            report.recovery = info
            report.recovered_values = xr
    return report

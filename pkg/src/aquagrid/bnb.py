"""Best-bound branch-and-bound over the binary variables of a convex system.

Each node solves the continuous cone relaxation (binaries relaxed to [0, 1]
except those fixed by branching) with the embedded interior-point solver.
Branching picks the most fractional binary, ties broken by smallest variable
index; node ids are assigned in creation order, which makes runs with
identical options bit-reproducible.  A rounding pass on the root relaxation
provides the initial incumbent; budget-style equality rows over binaries are
rounded by ranking so the budget stays satisfied.
"""

from __future__ import annotations

import heapq
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import SolveError
from .formulation import ConstraintSystem
from .socp import ConeOptions, lift_solution, solve_cone, to_cone


@dataclass
class BnbOptions:
    gap_tol: float = 1e-4
    int_tol: float = 1e-6
    feas_tol: float = 1e-6
    node_limit: int | None = None
    time_limit: float | None = None
    workers: int = 1
    first_feasible_only: bool = False
    cone: ConeOptions = field(default_factory=ConeOptions)


@dataclass
class Solution:
    status: str                  # optimal | infeasible | node_limit | time_limit
    objective: float
    best_bound: float
    rel_gap: float
    node_count: int
    wall_time: float
    values: np.ndarray | None
    cone_iterations: int = 0
    incumbent_violation: float = float("nan")

    def value(self, system: ConstraintSystem, *key) -> float:
        return float(self.values[system.idx(*key)])


def _relative_gap(objective, bound):
    if not math.isfinite(objective):
        return math.inf
    return max(0.0, objective - bound) / max(1.0, abs(objective))


class _NodeOutcome:
    __slots__ = ("node_id", "fixed", "status", "bound", "x", "iterations")

    def __init__(self, node_id, fixed, status, bound, x, iterations):
        self.node_id = node_id
        self.fixed = fixed
        self.status = status
        self.bound = bound
        self.x = x
        self.iterations = iterations


def _solve_node(system, fixed, cone_opts):
    prog, cmap = to_cone(system, fixed)
    if prog is None:
        return "infeasible", math.inf, None, 0
    res = solve_cone(prog, cone_opts)
    if res.status == "optimal":
        x = lift_solution(system, cmap, res.x)
        return "optimal", res.obj + cmap.obj_offset, x, res.iterations
    if res.status == "primal_infeasible":
        return "infeasible", math.inf, None, res.iterations
    if res.status == "dual_infeasible":
        raise SolveError("node relaxation is unbounded below; model is missing bounds")
    # inaccurate exits: a mildly converged iterate still yields a usable point,
    # but its objective is not a trusted bound, so fail loudly instead
    raise SolveError(
        f"node relaxation ended with status {res.status} "
        f"(pres={res.pres:.2e}, dres={res.dres:.2e}, relgap={res.relgap:.2e}); "
        f"diagnostics: {res.diagnostics}"
    )


def _binary_budget_groups(system: ConstraintSystem):
    """Equality rows whose support is all binary: (indices, rhs) per row."""
    binset = set(system.binary_idx)
    groups = []
    for terms, rhs, _label in system._eq_rows:
        idxs = [j for j, _ in terms]
        if idxs and all(j in binset for j in idxs) and \
                all(abs(c - 1.0) < 1e-12 for _, c in terms):
            groups.append((idxs, rhs))
    return groups


def _round_candidate(system: ConstraintSystem, x):
    """Deterministic rounding of the relaxation: budgets by ranking, rest by 0.5."""
    fixed = {}
    for idxs, rhs in _binary_budget_groups(system):
        k = int(round(rhs))
        order = sorted(idxs, key=lambda j: (-x[j], j))
        for rank, j in enumerate(order):
            fixed[j] = 1.0 if rank < k else 0.0
    for j in system.binary_idx:
        if j not in fixed:
            fixed[j] = 1.0 if x[j] >= 0.5 else 0.0
    return fixed


def _accept_incumbent(system, x, int_tol, feas_tol):
    """Snap near-integral binaries and verify residuals; None if not feasible."""
    xs = x.copy()
    for j in system.binary_idx:
        r = round(xs[j])
        if abs(xs[j] - r) > int_tol:
            return None, None
        xs[j] = r
    viol = system.max_violation(xs)
    if viol > feas_tol:
        return None, viol
    return xs, viol


def branch_and_bound(system: ConstraintSystem, options: BnbOptions | None = None) -> Solution:
    """Solve the mixed-binary convex system to the requested relative gap."""
    opts = options or BnbOptions()
    t0 = time.perf_counter()
    total_iters = 0
    node_count = 0
    next_id = 0

    incumbent_obj = math.inf
    incumbent_x = None
    incumbent_viol = math.nan

    def elapsed():
        return time.perf_counter() - t0

    def out_of_budget():
        if opts.time_limit is not None and elapsed() > opts.time_limit:
            return "time_limit"
        if opts.node_limit is not None and node_count >= opts.node_limit:
            return "node_limit"
        return None

    # root
    status, bound, x_root, iters = _solve_node(system, {}, opts.cone)
    total_iters += iters
    node_count += 1
    if status == "infeasible":
        return Solution("infeasible", math.inf, math.inf, math.inf, node_count,
                        elapsed(), None, total_iters)

    def try_incumbent(x):
        nonlocal incumbent_obj, incumbent_x, incumbent_viol
        snapped, viol = _accept_incumbent(system, x, opts.int_tol, opts.feas_tol)
        if snapped is None:
            return False
        obj = system.objective_value(snapped)
        if obj < incumbent_obj - 1e-12:
            incumbent_obj, incumbent_x, incumbent_viol = obj, snapped, viol
        return True

    integral_root = try_incumbent(x_root)
    if system.binary_idx and not integral_root:
        # rounding heuristic: one extra cone solve for an early incumbent
        fixed = _round_candidate(system, x_root)
        h_status, _h_bound, h_x, h_iters = _solve_node(system, fixed, opts.cone)
        total_iters += h_iters
        node_count += 1
        if h_status == "optimal":
            try_incumbent(h_x)

    heap = []   # (bound, node_id, fixed)
    if not integral_root:
        heapq.heappush(heap, (bound, 0, {}, x_root))
    global_bound = bound

    def prune_level():
        return incumbent_obj - opts.gap_tol * max(1.0, abs(incumbent_obj))

    limit_status = None
    pool = ThreadPoolExecutor(max_workers=opts.workers) if opts.workers > 1 else None
    try:
        while heap:
            global_bound = min(heap[0][0], incumbent_obj)
            if _relative_gap(incumbent_obj, global_bound) <= opts.gap_tol:
                break
            if opts.first_feasible_only and incumbent_x is not None:
                limit_status = "feasible"
                break
            limit_status = out_of_budget()
            if limit_status:
                break

            node_bound, _nid, fixed, x_rel = heapq.heappop(heap)
            if node_bound >= prune_level():
                continue
            # branch on the most fractional binary, smallest index on ties
            frac_j, frac_d = -1, -1.0
            for j in system.binary_idx:
                if j in fixed:
                    continue
                d = abs(x_rel[j] - round(x_rel[j]))
                if d > frac_d + 1e-15:
                    frac_j, frac_d = j, d
            if frac_j < 0:
                # integral but rejected earlier (residuals): nothing to branch on
                continue

            children = []
            for val in (0.0, 1.0):
                child_fixed = dict(fixed)
                child_fixed[frac_j] = val
                next_id += 1
                children.append((next_id, child_fixed))

            if pool is not None:
                futs = [(cid, cf, pool.submit(_solve_node, system, cf, opts.cone))
                        for cid, cf in children]
                results = [_NodeOutcome(cid, cf, *fut.result()) for cid, cf, fut in futs]
            else:
                results = [_NodeOutcome(cid, cf, *_solve_node(system, cf, opts.cone))
                           for cid, cf in children]
            results.sort(key=lambda r: r.node_id)
            for r in results:
                node_count += 1
                total_iters += r.iterations
                if r.status == "infeasible":
                    continue
                child_bound = max(r.bound, node_bound)   # bounds never regress
                if try_incumbent(r.x):
                    continue
                if child_bound < prune_level():
                    heapq.heappush(heap, (child_bound, r.node_id, r.fixed, r.x))
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    if heap:
        global_bound = min(min(e[0] for e in heap), incumbent_obj)
    else:
        global_bound = incumbent_obj if incumbent_x is not None else math.inf

    wall = elapsed()
    if incumbent_x is None:
        status = "infeasible" if not heap and limit_status is None else \
            (limit_status or "infeasible")
        return Solution(status, math.inf, global_bound, math.inf, node_count,
                        wall, None, total_iters)
    gap = _relative_gap(incumbent_obj, global_bound)
    status = "optimal" if gap <= opts.gap_tol else (limit_status or "optimal")
    return Solution(status, incumbent_obj, global_bound, gap, node_count, wall,
                    incumbent_x, total_iters, incumbent_viol)


def enumerate_binaries(system: ConstraintSystem, cone_opts: ConeOptions | None = None):
    """Exhaustive oracle: solve every binary pattern, return (best obj, pattern).

    Only sensible for small systems; used to cross-check the search.
    """
    import itertools

    cone_opts = cone_opts or ConeOptions()
    bidx = list(system.binary_idx)
    best = (math.inf, None)
    for bits in itertools.product((0.0, 1.0), repeat=len(bidx)):
        fixed = dict(zip(bidx, bits))
        status, bound, x, _ = _solve_node(system, fixed, cone_opts)
        if status != "optimal":
            continue
        obj = system.objective_value(x)
        if obj < best[0]:
            best = (obj, bits)
    return best

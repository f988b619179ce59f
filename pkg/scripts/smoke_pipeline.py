"""End-to-end scratch check on a minimal coupled case."""
import json, sys, time
sys.path.insert(0, "src")
import numpy as np
from aquagrid.network import load_case, validate_case
from aquagrid.formulation import build_micp, build_minlp
from aquagrid.bnb import branch_and_bound, BnbOptions
from aquagrid.physics import exactness

TINY = {
    "name": "tiny",
    "bases": {"s_base_mva": 1.0, "v_base_kv": 4.16},
    "time": {"periods": 3, "dt_hours": 1.0},
    "prices": [30.0, 80.0, 20.0],
    "electric": {
        "root": "b1",
        "buses": [
            {"id": "b1", "v_min": 0.9025, "v_max": 1.1025,
             "generator": {"p_min": -5, "p_max": 5, "q_min": -5, "q_max": 5}},
            {"id": "b2", "v_min": 0.9025, "v_max": 1.1025,
             "p_load": [0.3, 0.5, 0.2], "q_load": [0.1, 0.2, 0.05],
             "pump": "pm1"},
        ],
        "lines": [
            {"from": "b1", "to": "b2", "r": 0.02, "x": 0.04, "i_max": 4.0, "s_max": 1.6},
        ],
    },
    "bess": [],
    "water": {
        "nodes": [
            {"id": "src", "elevation": 0.0, "y_min": 5.0, "y_max": 5.0,
             "source": {"w_min": 0.0, "w_max": 2.0}},
            {"id": "city", "elevation": 2.0, "y_min": 2.0, "y_max": 40.0,
             "demand": [0.1, 0.12, 0.08]},
        ],
        "pipes": [
            {"id": "pp1", "from": "src", "to": "city", "r_hyd": 60.0,
             "f_min": 0.0, "f_max": 0.5},
        ],
        "pumps": [
            {"id": "pm1", "pipe": "pp1", "bus": "b2", "head_slope": 15.0,
             "head_intercept": 25.0, "efficiency": 0.8, "pq_ratio": 2.0},
        ],
        "tanks": [
            {"id": "tk", "node": "city", "s_min": 100.0, "s_max": 2000.0,
             "s_init": 800.0, "owner": "utility"},
        ],
        "irrigation": [],
    },
}

path = "/tmp/tiny_case.json"
json.dump(TINY, open(path, "w"))
case = load_case(path)
rep = validate_case(case)
print("validation ok:", rep.ok, "flags:", rep.flags)

sys_micp = build_micp(case)
print("counts:", sys_micp.count_summary())

t0 = time.perf_counter()
sol = branch_and_bound(sys_micp, BnbOptions())
print(f"solve: status={sol.status} obj={sol.objective:.6f} bound={sol.best_bound:.6f} "
      f"gap={sol.rel_gap:.2e} nodes={sol.node_count} viol={sol.incumbent_violation:.2e} "
      f"t={time.perf_counter()-t0:.2f}s")

for t in range(3):
    a = sol.value(sys_micp, "alpha", "pm1", t)
    f = sol.value(sys_micp, "f", "pp1", t)
    P = sol.value(sys_micp, "Ppump", "pm1", t)
    wut = sol.value(sys_micp, "wut", "tk", t)
    print(f"  t={t}: alpha={a:.3f} f={f:.4f} Ppump={P:.4f} wut={wut:+.4f}")

minlp = build_minlp(case)
rep = exactness(sol.values, sys_micp, minlp)
print("exactness raw: exact=%s max_res=%.3e worst=%s" % (rep.exact, rep.max_residual, rep.worst))
print("recovery:", {k: v for k, v in rep.recovery.items() if k != 'max_delta'})
print("deltas:", rep.recovery.get("max_delta"))
if rep.recovered_values is not None:
    rep2 = exactness(rep.recovered_values, sys_micp, minlp, recover=False)
    print("exactness after recovery: exact=%s max_res=%.3e" % (rep2.exact, rep2.max_residual))
    print("objective drift:", rep.recovery["objective_drift"])

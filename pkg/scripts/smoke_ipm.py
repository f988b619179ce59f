"""Scratch checks for the cone solver while developing."""
import numpy as np
import scipy.sparse as sp
import sys
sys.path.insert(0, "src")

from aquagrid.socp import ConeProgram, ConeOptions, solve_cone, _Cones, _Scaling

rng = np.random.default_rng(0)

# NT scaling property: W^2 z = s on random interior points
cones = _Cones(3, (3, 4))
s = cones.shift_into(rng.standard_normal(cones.m))
z = cones.shift_into(rng.standard_normal(cones.m))
sc = _Scaling(cones, s, z)
w2z = sc.apply_w2(z)
print("NT W^2 z == s:", np.allclose(w2z, s), np.abs(w2z - s).max())
lam1 = sc.apply_w(z)
lam2 = sc.apply_winv(s)
print("lam = Wz == W^-1 s:", np.allclose(lam1, lam2), np.abs(lam1 - lam2).max())
# jordan solve
u = rng.standard_normal(cones.m)
v = cones.jordan_solve(sc.lam, u)
print("jordan solve:", np.allclose(cones.jordan_mul(sc.lam, v), u))

# LP: min x s.t. x >= 1
prog = ConeProgram(c=[1.0], a=sp.csr_matrix((0, 1)), b=[],
                   g=[[-1.0]], h=[-1.0], n_lin=1, soc_dims=())
res = solve_cone(prog)
print("LP:", res.status, res.x, res.obj, res.iterations)

# min x s.t. x^2 <= 4  ->  x = -2
prog = ConeProgram(c=[1.0], a=sp.csr_matrix((0, 1)), b=[],
                   g=[[0.0], [-1.0]], h=[2.0, 0.0], n_lin=0, soc_dims=(2,))
res = solve_cone(prog)
print("|x|<=2:", res.status, res.x, res.obj, res.iterations)

# AM-GM: min x3+x4 s.t. x1=2, x1^2 <= x3 x4, x3,x4 >= 0 -> (2,2), obj 4
c = [0.0, 1.0, 1.0]
a = [[1.0, 0.0, 0.0]]
b = [2.0]
g = [[0.0, -1.0, 0.0],   # x3 >= 0
     [0.0, 0.0, -1.0],   # x4 >= 0
     [0.0, -1.0, -1.0],  # soc: (x3+x4, 2x1, x3-x4)
     [-2.0, 0.0, 0.0],
     [0.0, -1.0, 1.0]]
h = [0.0, 0.0, 0.0, 0.0, 0.0]
res = solve_cone(ConeProgram(c=c, a=a, b=b, g=g, h=h, n_lin=2, soc_dims=(3,)))
print("AM-GM:", res.status, res.x, res.obj, res.iterations, res.pres, res.dres, res.relgap)

# infeasible: x >= 1, x <= 0
prog = ConeProgram(c=[1.0], a=sp.csr_matrix((0, 1)), b=[],
                   g=[[-1.0], [1.0]], h=[-1.0, 0.0], n_lin=2, soc_dims=())
res = solve_cone(prog)
print("infeasible:", res.status, res.iterations)

# unbounded: min x, x <= 0
prog = ConeProgram(c=[1.0], a=sp.csr_matrix((0, 1)), b=[],
                   g=[[1.0]], h=[0.0], n_lin=1, soc_dims=())
res = solve_cone(prog)
print("unbounded:", res.status, res.iterations)

# random LP cross-check vs scipy linprog
from scipy.optimize import linprog
ok = 0
for k in range(20):
    n, mrows = 8, 14
    A = rng.standard_normal((mrows, n))
    x0 = rng.random(n)
    bub = A @ x0 + rng.random(mrows)
    cc = rng.standard_normal(n)
    ref = linprog(cc, A_ub=A, b_ub=bub, bounds=[(-5, 5)] * n, method="highs")
    G = np.vstack([A, np.eye(n), -np.eye(n)])
    hh = np.concatenate([bub, np.full(n, 5.0), np.full(n, 5.0)])
    res = solve_cone(ConeProgram(c=cc, a=sp.csr_matrix((0, n)), b=[],
                                 g=G, h=hh, n_lin=G.shape[0], soc_dims=()))
    if res.status == "optimal" and abs(res.obj - ref.fun) < 1e-6 * max(1, abs(ref.fun)):
        ok += 1
    else:
        print("  mismatch:", res.status, res.obj, ref.fun)
print(f"random LPs matching scipy: {ok}/20")

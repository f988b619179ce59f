"""Second-order-cone programming layer.

:func:`to_cone` reformulates a finished constraint system (with binaries
fixed or relaxed to their boxes) into the standard conic form

    minimize    c'x
    subject to  A x = b,    G x + s = h,    s in K,

where ``K`` is a nonnegative orthant followed by second-order cones.  Convex
quadratic rows and rotated-cone rows map to second-order cones exactly;
quadratic objective terms get epigraph variables.

:func:`solve_cone` is a Mehrotra predictor-corrector primal-dual
interior-point method with Nesterov-Todd scaling on the homogeneous
self-dual embedding, so infeasibility comes out as a certified dual ray
rather than a failure.  Linear algebra is a sparse LU of the regularized KKT
system with iterative refinement against the unregularized operator.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import BuildError, NumericalError


# ---------------------------------------------------------------------------
# program container
# ---------------------------------------------------------------------------

@dataclass
class ConeProgram:
    c: np.ndarray
    a: object            # (p, n) sparse or dense equality matrix
    b: np.ndarray
    g: object            # (m, n) sparse or dense cone matrix
    h: np.ndarray
    n_lin: int
    soc_dims: tuple

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        self.a = sp.csc_matrix(self.a) if not sp.issparse(self.a) else self.a.tocsc()
        self.g = sp.csc_matrix(self.g) if not sp.issparse(self.g) else self.g.tocsc()
        n = self.c.size
        if self.a.shape != (self.b.size, n):
            raise ValueError(f"equality block shape {self.a.shape} inconsistent")
        m = self.n_lin + sum(self.soc_dims)
        if self.g.shape != (m, n) or self.h.size != m:
            raise ValueError(f"cone block shape {self.g.shape} vs dims {m}")
        if any(d < 2 for d in self.soc_dims):
            raise ValueError("second-order cones need dimension >= 2")

    @property
    def n(self):
        return self.c.size

    @property
    def p(self):
        return self.b.size

    @property
    def m(self):
        return self.h.size


@dataclass
class ConeOptions:
    feastol: float = 1e-8
    abstol: float = 1e-8
    reltol: float = 1e-8
    max_iter: int = 150
    step_frac: float = 0.99
    reg: float = 1e-9
    refine: int = 2
    verbose: bool = False


@dataclass
class ConeResult:
    status: str                  # optimal | primal_infeasible | dual_infeasible |
                                 # iteration_limit | numerical_limit
    x: np.ndarray | None
    obj: float
    iterations: int
    pres: float
    dres: float
    gap: float
    relgap: float
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    s: np.ndarray | None = None
    tau: float = 1.0
    kappa: float = 0.0
    wall_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# vectorized cone operations (orthant + grouped second-order cones)
# ---------------------------------------------------------------------------

class _Cones:
    def __init__(self, n_lin, soc_dims):
        self.n_lin = n_lin
        self.dims = tuple(soc_dims)
        self.m = n_lin + sum(soc_dims)
        self.degree = n_lin + len(soc_dims)
        self.groups = {}          # dim -> (nblocks, dim) row-index array
        offset = n_lin
        per_dim: dict[int, list] = {}
        for d in soc_dims:
            per_dim.setdefault(d, []).append(np.arange(offset, offset + d))
            offset += d
        for d, rows in per_dim.items():
            self.groups[d] = np.array(rows, dtype=int)

    def identity(self):
        e = np.zeros(self.m)
        e[:self.n_lin] = 1.0
        for idx in self.groups.values():
            e[idx[:, 0]] = 1.0
        return e

    def margin(self, v):
        """Smallest cone margin: entries for the orthant, v0 - ||v1:|| per cone."""
        best = math.inf
        if self.n_lin:
            best = min(best, float(v[:self.n_lin].min()))
        for idx in self.groups.values():
            blk = v[idx]
            res = blk[:, 0] - np.linalg.norm(blk[:, 1:], axis=1)
            best = min(best, float(res.min()))
        return best

    def shift_into(self, v):
        mar = self.margin(v)
        if mar <= 0:
            v = v + (1.0 - mar) * self.identity()
        return v

    def dots_soc(self, u, v):
        """Per-block inner products and first components, for diagnostics."""
        return [(idx, u[idx], v[idx]) for idx in self.groups.values()]

    def max_step(self, v, dv):
        """Largest t >= 0 with v + t*dv on the cone boundary (inf if interior ray)."""
        best = math.inf
        if self.n_lin:
            neg = dv[:self.n_lin] < 0
            if neg.any():
                best = min(best, float((-v[:self.n_lin][neg] / dv[:self.n_lin][neg]).min()))
        for idx in self.groups.values():
            s0, sb = v[idx[:, 0]], v[idx[:, 1:]]
            d0, db = dv[idx[:, 0]], dv[idx[:, 1:]]
            aa = d0 * d0 - (db * db).sum(axis=1)
            bb = s0 * d0 - (sb * db).sum(axis=1)
            cc = s0 * s0 - (sb * sb).sum(axis=1)
            cc = np.maximum(cc, 0.0)
            for a_, b_, c_ in zip(aa, bb, cc):
                r = _smallest_pos_root(a_, 2.0 * b_, c_)
                if r is not None:
                    best = min(best, r)
        return best

    # -- Jordan algebra on the second-order part ---------------------------

    def jordan_mul(self, u, v):
        out = np.empty(self.m)
        out[:self.n_lin] = u[:self.n_lin] * v[:self.n_lin]
        for idx in self.groups.values():
            ub, vb = u[idx], v[idx]
            out[idx[:, 0]] = (ub * vb).sum(axis=1)
            out[idx[:, 1:]] = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        return out

    def jordan_solve(self, lam, u):
        """x with lam o x = u (lam in the cone interior)."""
        out = np.empty(self.m)
        out[:self.n_lin] = u[:self.n_lin] / lam[:self.n_lin]
        for idx in self.groups.values():
            l0, lb = lam[idx[:, 0]], lam[idx[:, 1:]]
            u0, ub = u[idx[:, 0]], u[idx[:, 1:]]
            det = l0 * l0 - (lb * lb).sum(axis=1)
            lu_dot = (lb * ub).sum(axis=1)
            x0 = (l0 * u0 - lu_dot) / det
            out[idx[:, 0]] = x0
            out[idx[:, 1:]] = (ub - x0[:, None] * lb) / l0[:, None]
        return out


def _smallest_pos_root(a, b, c):
    """Smallest positive root of a t^2 + b t + c = 0 (c >= 0), None if absent."""
    if abs(a) < 1e-14:
        if b >= -1e-14:
            return None
        return max(0.0, -c / b)
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    r1 = (-b - sq) / (2.0 * a)
    r2 = (-b + sq) / (2.0 * a)
    roots = [r for r in (min(r1, r2), max(r1, r2)) if r > 1e-14]
    return roots[0] if roots else None


class _Scaling:
    """Nesterov-Todd scaling: symmetric W with W z = W^-1 s (= lam).

    For each second-order cone the scaling is ``W = eta * Wbar`` with
    ``eta = (det s / det z)^{1/4}`` and ``Wbar`` the hyperbolic square root
    of ``H = 2*wbar*wbar' - J`` (so ``Wbar^2 = H``), where ``wbar`` is the
    unit-hyperbolic scaling point built from the normalized iterates.
    """

    def __init__(self, cones: _Cones, s, z):
        self.cones = cones
        self.lp_w2 = None
        self.soc = {}            # dim -> (wbar (nb,q), eta (nb,))
        if cones.n_lin:
            sl, zl = s[:cones.n_lin], z[:cones.n_lin]
            if (sl <= 0).any() or (zl <= 0).any():
                raise NumericalError("orthant iterate left the interior")
            self.lp_w2 = sl / zl
        for d, idx in cones.groups.items():
            sb, zb = s[idx], z[idx]
            det_s = sb[:, 0] ** 2 - (sb[:, 1:] ** 2).sum(axis=1)
            det_z = zb[:, 0] ** 2 - (zb[:, 1:] ** 2).sum(axis=1)
            if (det_s <= 0).any() or (det_z <= 0).any():
                raise NumericalError("cone iterate left the interior")
            sn = sb / np.sqrt(det_s)[:, None]
            zn = zb / np.sqrt(det_z)[:, None]
            gamma = np.sqrt((1.0 + (sn * zn).sum(axis=1)) / 2.0)
            wbar = (sn + _jvec(zn)) / (2.0 * gamma[:, None])
            eta = (det_s / det_z) ** 0.25
            self.soc[d] = (wbar, eta)
        self.lam = self.apply_w(z)

    @staticmethod
    def _wbar_mul(wbar, u):
        """Wbar @ u rowwise: [[w0, w1'], [w1, I + w1 w1'/(1+w0)]]."""
        w0, w1 = wbar[:, :1], wbar[:, 1:]
        u0, u1 = u[:, :1], u[:, 1:]
        dot = (w1 * u1).sum(axis=1, keepdims=True)
        out0 = w0 * u0 + dot
        out1 = u0 * w1 + u1 + (dot / (1.0 + w0)) * w1
        return np.concatenate([out0, out1], axis=1)

    def _apply(self, u, inverse):
        cones = self.cones
        out = np.empty(cones.m)
        if cones.n_lin:
            w = np.sqrt(self.lp_w2)
            out[:cones.n_lin] = u[:cones.n_lin] / w if inverse else u[:cones.n_lin] * w
        for d, idx in cones.groups.items():
            wbar, eta = self.soc[d]
            ub = u[idx]
            if inverse:
                # Wbar^-1 = J Wbar J
                res = _jvec(self._wbar_mul(wbar, _jvec(ub))) / eta[:, None]
            else:
                res = eta[:, None] * self._wbar_mul(wbar, ub)
            out[idx] = res
        return out

    def apply_w(self, u):
        return self._apply(u, inverse=False)

    def apply_winv(self, u):
        return self._apply(u, inverse=True)

    def apply_w2(self, u):
        """W^2 u = eta^2 * (2 wbar (wbar'u) - J u) per cone, diagonal on the orthant."""
        cones = self.cones
        out = np.empty(cones.m)
        if cones.n_lin:
            out[:cones.n_lin] = self.lp_w2 * u[:cones.n_lin]
        for d, idx in cones.groups.items():
            wbar, eta = self.soc[d]
            ub = u[idx]
            dot = (wbar * ub).sum(axis=1, keepdims=True)
            out[idx] = (eta ** 2)[:, None] * (2.0 * dot * wbar - _jvec(ub))
        return out

    def w2_blocks(self):
        """Dense W^2 = eta^2 (2 wbar wbar' - J) blocks for KKT assembly."""
        blocks = {}
        for d, idx in self.cones.groups.items():
            wbar, eta = self.soc[d]
            h = 2.0 * np.einsum("bi,bj->bij", wbar, wbar)
            jd = np.eye(d)
            jd[1:, 1:] *= -1.0
            h -= jd[None, :, :]
            blocks[d] = (eta ** 2)[:, None, None] * h
        return blocks


def _jvec(u):
    out = u.copy()
    out[:, 1:] *= -1.0
    return out


# ---------------------------------------------------------------------------
# KKT factorization
# ---------------------------------------------------------------------------

class _Kkt:
    """Sparse LU of [[dI, A', G'], [A, -dI, 0], [G, 0, -(W^2+dI)]]."""

    def __init__(self, a, g, cones: _Cones, reg):
        self.a, self.g, self.cones, self.reg = a.tocoo(), g.tocoo(), cones, reg
        n = a.shape[1]
        p, m = a.shape[0], g.shape[0]
        self.n, self.p, self.m = n, p, m
        rows, cols, data = [], [], []
        rows.append(np.arange(n)); cols.append(np.arange(n))
        data.append(np.full(n, reg))
        rows.append(self.a.row + n); cols.append(self.a.col)
        data.append(self.a.data)
        rows.append(self.a.col); cols.append(self.a.row + n)
        data.append(self.a.data)
        rows.append(np.arange(n, n + p)); cols.append(np.arange(n, n + p))
        data.append(np.full(p, -reg))
        rows.append(self.g.row + n + p); cols.append(self.g.col)
        data.append(self.g.data)
        rows.append(self.g.col); cols.append(self.g.row + n + p)
        data.append(self.g.data)
        self._static_rows = np.concatenate(rows)
        self._static_cols = np.concatenate(cols)
        self._static_data = np.concatenate(data)
        # dynamic (3,3) block pattern: orthant diagonal then grouped dense blocks
        drows = [np.arange(n + p, n + p + cones.n_lin)]
        dcols = [np.arange(n + p, n + p + cones.n_lin)]
        for d, idx in cones.groups.items():
            r = np.repeat(idx, d, axis=1).reshape(-1)
            c = np.tile(idx, (1, d)).reshape(-1)
            drows.append(r + n + p)
            dcols.append(c + n + p)
        self._dyn_rows = np.concatenate(drows) if drows else np.zeros(0, dtype=int)
        self._dyn_cols = np.concatenate(dcols) if dcols else np.zeros(0, dtype=int)
        self._rows = np.concatenate([self._static_rows, self._dyn_rows])
        self._cols = np.concatenate([self._static_cols, self._dyn_cols])
        self._a_csr = a.tocsr()
        self._g_csr = g.tocsr()
        self._at_csr = a.T.tocsr()
        self._gt_csr = g.T.tocsr()
        self.scaling: _Scaling | None = None
        self._lu = None

    def factor(self, scaling: _Scaling | None):
        """Refactor with the given NT scaling (identity when None)."""
        cones = self.cones
        self.scaling = scaling
        if scaling is None:
            lp = np.ones(cones.n_lin)
            blocks = {d: np.tile(np.eye(d), (idx.shape[0], 1, 1))
                      for d, idx in cones.groups.items()}
        else:
            lp = scaling.lp_w2 if cones.n_lin else np.zeros(0)
            blocks = scaling.w2_blocks()
        dyn = [-(lp + self.reg)]
        for d in cones.groups:
            blk = blocks[d].copy()
            blk[:, np.arange(d), np.arange(d)] += self.reg
            dyn.append(-blk.reshape(-1))
        dyn_data = np.concatenate(dyn) if dyn else np.zeros(0)
        data = np.concatenate([self._static_data, dyn_data])
        nn = self.n + self.p + self.m
        kkt = sp.coo_matrix((data, (self._rows, self._cols)), shape=(nn, nn)).tocsc()
        try:
            self._lu = splu(kkt)
        except RuntimeError as exc:
            raise NumericalError(f"KKT factorization failed: {exc}") from exc

    def _apply_unreg(self, v):
        """Unregularized KKT product, for iterative refinement."""
        n, p, m = self.n, self.p, self.m
        x, y, z = v[:n], v[n:n + p], v[n + p:]
        if self.scaling is None:
            w2z = z
        else:
            w2z = self.scaling.apply_w2(z)
        top = self._at_csr @ y + self._gt_csr @ z
        mid = self._a_csr @ x
        bot = self._g_csr @ x - w2z
        return np.concatenate([top, mid, bot])

    def solve(self, r1, r2, r3, refine=2):
        rhs = np.concatenate([r1, r2, r3])
        sol = self._lu.solve(rhs)
        for _ in range(refine):
            res = rhs - self._apply_unreg(sol)
            if np.linalg.norm(res) <= 1e-14 * max(1.0, np.linalg.norm(rhs)):
                break
            sol = sol + self._lu.solve(res)
        if not np.all(np.isfinite(sol)):
            raise NumericalError("KKT solve produced non-finite values")
        n, p = self.n, self.p
        return sol[:n], sol[n:n + p], sol[n + p:]


# ---------------------------------------------------------------------------
# the interior-point method on the homogeneous self-dual embedding
# ---------------------------------------------------------------------------

def solve_cone(prog: ConeProgram, options: ConeOptions | None = None) -> ConeResult:
    """Solve the cone program to certified optimality or infeasibility.

    Optimality requires primal/dual residuals <= feastol and the
    complementarity gap below abstol (absolute) or reltol (relative to the
    objective).  Returned rays are normalized certificates.  Iteration limit
    returns the best iterate with diagnostics, never silently.
    """
    opts = options or ConeOptions()
    t0 = time.perf_counter()
    n, p, m = prog.n, prog.p, prog.m
    if n == 0:
        return ConeResult("optimal", np.zeros(0), 0.0, 0, 0.0, 0.0, 0.0, 0.0,
                          wall_time=time.perf_counter() - t0)
    if m == 0:
        raise BuildError("cone program needs at least one cone row")
    cones = _Cones(prog.n_lin, prog.soc_dims)
    a, g = prog.a, prog.g
    b, c, h = prog.b, prog.c, prog.h
    norm_b = max(1.0, float(np.linalg.norm(b))) if p else 1.0
    norm_h = max(1.0, float(np.linalg.norm(h)))
    norm_c = max(1.0, float(np.linalg.norm(c)))
    mat_scale = max(1.0,
                    float(abs(a.data).max()) if a.nnz else 0.0,
                    float(abs(g.data).max()) if g.nnz else 0.0)

    kkt = _Kkt(a, g, cones, opts.reg)
    kkt.factor(None)
    x0, _, z0 = kkt.solve(np.zeros(n), b, h, refine=opts.refine)
    s = cones.shift_into(-z0)
    x = x0
    _, y0, z1 = kkt.solve(-c, np.zeros(p), np.zeros(m), refine=opts.refine)
    y = y0
    z = cones.shift_into(z1)
    tau, kappa = 1.0, 1.0

    at, gt = a.T.tocsr(), g.T.tocsr()
    best = None
    mu0 = None
    small_steps = 0

    def residuals():
        rx = at @ y + gt @ z + c * tau
        ry = a @ x - b * tau
        rz = g @ x + s - h * tau
        rt = float(c @ x + b @ y + h @ z + kappa)
        return rx, ry, rz, rt

    status = "iteration_limit"
    it = 0
    info = {}
    for it in range(opts.max_iter + 1):
        rx, ry, rz, rt = residuals()
        gap = float(s @ z + tau * kappa)
        mu = gap / (cones.degree + 1)
        if mu0 is None:
            mu0 = mu

        pres = max(np.linalg.norm(ry) / norm_b, np.linalg.norm(rz) / norm_h) / tau
        dres = np.linalg.norm(rx) / norm_c / tau
        cgap = float(s @ z) / tau ** 2
        pobj = float(c @ x) / tau
        relgap = cgap / max(1.0, abs(pobj))
        if opts.verbose:
            print(f"  it {it:3d}  pres {pres:9.2e} dres {dres:9.2e} "
                  f"gap {cgap:9.2e} tau {tau:8.2e} kappa {kappa:8.2e}")
        metric = max(pres, dres, relgap)
        if best is None or metric < best[0]:
            best = (metric, x / tau, y / tau, z / tau, s / tau, pres, dres, cgap, relgap)

        if pres <= opts.feastol and dres <= opts.feastol and \
                (cgap <= opts.abstol or relgap <= opts.reltol):
            status = "optimal"
            break

        # infeasibility certificates from the embedding rays
        dual_gain = -(float(b @ y) + float(h @ z))
        if dual_gain > 1e-12:
            cert = np.linalg.norm(at @ y + gt @ z) / dual_gain
            if cert <= opts.feastol * mat_scale:
                status = "primal_infeasible"
                info["certificate"] = {"y": y / dual_gain, "z": z / dual_gain}
                break
        primal_gain = -float(c @ x)
        if primal_gain > 1e-12:
            cert = max(np.linalg.norm(a @ x),
                       np.linalg.norm(g @ x + s)) / primal_gain
            if cert <= opts.feastol * mat_scale:
                status = "dual_infeasible"
                info["certificate"] = {"x": x / primal_gain}
                break
        if it == opts.max_iter:
            break

        try:
            scaling = _Scaling(cones, s, z)
        except NumericalError as exc:
            status = "numerical_limit"
            info["note"] = str(exc)
            break
        lam = scaling.lam
        kkt.factor(scaling)
        x2, y2, z2 = kkt.solve(-c, b, h, refine=opts.refine)
        denom = float(c @ x2 + b @ y2 + h @ z2) - kappa / tau

        def direction(eta, d_s, d_kappa):
            w_v = scaling.apply_w(cones.jordan_solve(lam, d_s))
            x1, y1, z1_ = kkt.solve(-eta * rx, -eta * ry, -eta * rz - w_v,
                                    refine=opts.refine)
            num = (-eta * rt - float(c @ x1 + b @ y1 + h @ z1_) - d_kappa / tau)
            dtau = num / denom if abs(denom) > 1e-300 else 0.0
            dx = x1 + dtau * x2
            dy = y1 + dtau * y2
            dz = z1_ + dtau * z2
            ds = w_v - scaling.apply_w2(dz)
            dkap = (d_kappa - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkap

        # predictor
        lam_sq = cones.jordan_mul(lam, lam)
        dxa, dya, dza, dsa, dta, dka = direction(1.0, -lam_sq, -tau * kappa)
        alpha_aff = _max_step(cones, s, dsa, z, dza, tau, dta, kappa, dka)
        alpha_aff = min(1.0, opts.step_frac * alpha_aff)
        gap_aff = (float((s + alpha_aff * dsa) @ (z + alpha_aff * dza))
                   + (tau + alpha_aff * dta) * (kappa + alpha_aff * dka))
        sigma = min(1.0, max(0.0, gap_aff / gap)) ** 3

        # corrector
        corr = cones.jordan_mul(scaling.apply_winv(dsa), scaling.apply_w(dza))
        e = cones.identity()
        d_s = sigma * mu * e - lam_sq - corr
        d_kappa = sigma * mu - tau * kappa - dta * dka
        dx, dy, dz, ds, dtau, dkap = direction(1.0 - sigma, d_s, d_kappa)
        alpha = _max_step(cones, s, ds, z, dz, tau, dtau, kappa, dkap)
        alpha = min(1.0, opts.step_frac * alpha)
        if alpha <= 1e-10:
            small_steps += 1
            if small_steps >= 3:
                status = "numerical_limit"
                info["note"] = "step length collapsed"
                break
        else:
            small_steps = 0
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkap
        if not (np.isfinite(tau) and tau > 0 and np.isfinite(kappa)):
            status = "numerical_limit"
            info["note"] = f"embedding scalars degenerated: tau={tau}, kappa={kappa}"
            break

    wall = time.perf_counter() - t0
    if status == "optimal":
        xt = x / tau
        return ConeResult("optimal", xt, float(c @ xt), it, pres, dres, cgap, relgap,
                          y=y / tau, z=z / tau, s=s / tau, tau=tau, kappa=kappa,
                          wall_time=wall, diagnostics=info)
    if status in ("primal_infeasible", "dual_infeasible"):
        return ConeResult(status, None, math.inf if status == "primal_infeasible" else -math.inf,
                          it, pres, dres, cgap, relgap, tau=tau, kappa=kappa,
                          wall_time=wall, diagnostics=info)
    # iteration/numerical limit: hand back the best iterate seen, with context
    _, bx, by, bz, bs, bpres, bdres, bgap, brelgap = best
    info.update({"mu0": mu0, "last_tau": tau, "last_kappa": kappa})
    return ConeResult(status, bx, float(c @ bx), it, bpres, bdres, bgap, brelgap,
                      y=by, z=bz, s=bs, tau=tau, kappa=kappa,
                      wall_time=wall, diagnostics=info)


def _max_step(cones, s, ds, z, dz, tau, dtau, kappa, dkappa):
    alpha = min(cones.max_step(s, ds), cones.max_step(z, dz))
    if dtau < 0:
        alpha = min(alpha, -tau / dtau)
    if dkappa < 0:
        alpha = min(alpha, -kappa / dkappa)
    return alpha


# ---------------------------------------------------------------------------
# constraint system -> cone program
# ---------------------------------------------------------------------------

@dataclass
class ConeMap:
    """Bookkeeping from cone variables back to system variables."""
    kept: np.ndarray
    fixed: dict
    n_sys: int
    n_epi: int
    obj_offset: float
    infeasible_const: bool = False


def _cone_template(system):
    """Assemble (once per system) the full-variable cone blocks."""
    cache = getattr(system, "_cone_template_cache", None)
    if cache is not None:
        return cache
    f = system.finalize()
    n = system.n_vars
    epi_sources = sorted(system.obj_quad.items())
    n_epi = len(epi_sources)
    ntot = n + n_epi

    c = np.zeros(ntot)
    c[:n] = f["c"]
    for k, (j, coef) in enumerate(epi_sources):
        c[n + k] = coef

    a_eq = sp.hstack([f["a_eq"], sp.csr_matrix((f["a_eq"].shape[0], n_epi))]).tocsr() \
        if n_epi else f["a_eq"]
    b_eq = f["b_eq"]

    rows, cols, data, h = [], [], [], []

    def add_row(entries, rhs):
        r = len(h)
        for j, v in entries:
            rows.append(r)
            cols.append(j)
            data.append(v)
        h.append(rhs)

    # orthant rows: general inequalities then finite bounds
    ub_coo = f["a_ub"].tocoo()
    for r, j, v in zip(ub_coo.row, ub_coo.col, ub_coo.data):
        rows.append(int(r))
        cols.append(int(j))
        data.append(v)
    h.extend(f["b_ub"].tolist())
    bound_rows = []
    for j in range(n):
        if math.isfinite(f["ub"][j]):
            bound_rows.append(([(j, 1.0)], f["ub"][j]))
        if math.isfinite(f["lb"][j]):
            bound_rows.append(([(j, -1.0)], -f["lb"][j]))
    base = len(h)
    for k, (entries, rhs) in enumerate(bound_rows):
        for j, v in entries:
            rows.append(base + k)
            cols.append(j)
            data.append(v)
        h.append(rhs)
    n_lin = len(h)

    soc_dims = []

    def add_soc(row_list, rhs_list):
        for entries, rhs in zip(row_list, rhs_list):
            add_row(entries, rhs)
        soc_dims.append(len(rhs_list))

    for q in system.quads:
        quad = [(j, coef) for j, coef in q.quad if coef > 0.0]
        lin = list(q.lin)
        if not quad:
            raise BuildError(f"quad row {q.label} has no quadratic term")
        if not lin:
            if q.rhs < 0:
                raise BuildError(f"quad row {q.label}: negative constant bound")
            rl = [[]] + [[(j, -math.sqrt(co))] for j, co in quad]
            rr = [math.sqrt(q.rhs)] + [0.0] * len(quad)
            add_soc(rl, rr)
        else:
            # sum q x^2 <= t, t = rhs - l'x : ||(2 sqrt(q) x, 1 - t)|| <= 1 + t
            rl = [[(j, co) for j, co in lin]]
            rr = [1.0 + q.rhs]
            for j, co in quad:
                rl.append([(j, -2.0 * math.sqrt(co))])
                rr.append(0.0)
            rl.append([(j, -co) for j, co in lin])
            rr.append(1.0 - q.rhs)
            add_soc(rl, rr)

    for rc in system.rcones:
        rl = [[(rc.i3, -1.0), (rc.i4, -1.0)], [(rc.i1, -2.0 * math.sqrt(rc.a))]]
        rr = [0.0, 0.0]
        if rc.i2 is not None and rc.b > 0.0:
            rl.append([(rc.i2, -2.0 * math.sqrt(rc.b))])
            rr.append(0.0)
        rl.append([(rc.i3, -1.0), (rc.i4, 1.0)])
        rr.append(0.0)
        add_soc(rl, rr)

    for k, (j, _) in enumerate(epi_sources):
        u = n + k
        add_soc([[(u, -1.0)], [(j, -2.0)], [(u, 1.0)]], [1.0, 0.0, 1.0])

    g = sp.csr_matrix((data, (rows, cols)), shape=(len(h), ntot))
    cache = {
        "c": c, "a_eq": a_eq.tocsc(), "b_eq": b_eq,
        "g": g.tocsc(), "h": np.array(h),
        "n_lin": n_lin, "soc_dims": tuple(soc_dims),
        "n": n, "n_epi": n_epi,
    }
    system._cone_template_cache = cache
    return cache


def to_cone(system, fixed: dict | None = None):
    """Reformulate the system as a cone program, optionally fixing binaries.

    Returns ``(ConeProgram | None, ConeMap)``; the program is None when
    substituting the fixed values already violates a constant constraint
    (the map's ``infeasible_const`` flag is set).
    """
    if system.nonconvex:
        raise BuildError(
            f"{system.variant} system contains {len(system.nonconvex)} nonconvex "
            "relations; only convex variants can be reformulated to cone form"
        )
    fixed = dict(fixed or {})
    binset = set(system.binary_idx)
    for j in fixed:
        if j not in binset:
            raise BuildError(f"only binaries can be fixed, got variable {j}")
    tpl = _cone_template(system)
    n, n_epi = tpl["n"], tpl["n_epi"]
    ntot = n + n_epi

    keep_mask = np.ones(ntot, dtype=bool)
    fix_cols = np.array(sorted(fixed), dtype=int)
    if fix_cols.size:
        keep_mask[fix_cols] = False
    kept = np.flatnonzero(keep_mask)
    vals = np.array([fixed[j] for j in fix_cols])

    c = tpl["c"][kept]
    obj_offset = float(tpl["c"][fix_cols] @ vals) if fix_cols.size else 0.0

    a_full, b_full = tpl["a_eq"], tpl["b_eq"]
    g_full, h_full = tpl["g"], tpl["h"]
    if fix_cols.size:
        b = b_full - a_full[:, fix_cols] @ vals
        h = h_full - g_full[:, fix_cols] @ vals
    else:
        b, h = b_full.copy(), h_full.copy()
    a = a_full[:, kept]
    g = g_full[:, kept]

    cmap = ConeMap(kept=kept, fixed=fixed, n_sys=n,
                   n_epi=n_epi, obj_offset=obj_offset)
    # drop constant rows (all support fixed); check consistency
    row_nnz_a = np.diff(a.tocsr().indptr)
    if (row_nnz_a == 0).any():
        dead = row_nnz_a == 0
        if np.abs(b[dead]).max(initial=0.0) > 1e-9:
            cmap.infeasible_const = True
            return None, cmap
        live = np.flatnonzero(~dead)
        a, b = a.tocsr()[live], b[live]
    g_csr = g.tocsr()
    row_nnz_g = np.diff(g_csr.indptr)
    n_lin = tpl["n_lin"]
    lp_dead = (row_nnz_g[:n_lin] == 0)
    if lp_dead.any():
        if h[:n_lin][lp_dead].min(initial=0.0) < -1e-9:
            cmap.infeasible_const = True
            return None, cmap
        keep_rows = np.concatenate([np.flatnonzero(~lp_dead),
                                    np.arange(n_lin, g.shape[0])])
        g = g_csr[keep_rows]
        h = h[keep_rows]
        n_lin = int((~lp_dead).sum())

    prog = ConeProgram(c=c, a=a, b=b, g=g, h=h,
                       n_lin=n_lin, soc_dims=tpl["soc_dims"])
    return prog, cmap


def lift_solution(system, cmap: ConeMap, x_cone):
    """System-variable vector (epigraph extras dropped) from a cone solution."""
    full = np.empty(cmap.n_sys + cmap.n_epi)
    full[cmap.kept] = x_cone
    for j, v in cmap.fixed.items():
        full[j] = v
    return full[:cmap.n_sys]

"""Convex envelopes of the nonlinear couplings in the network model.

Three families live here:

* the tight envelope of the quadratic-coupling set
  ``{a*x1^2 + b*x2^2 = x3*x4, x1^2 + x2^2 <= c, box bounds}`` (used to relax
  branch power/current coupling and storage-loss coupling),
* the four-line flow/head-drop envelope of the signed pipe-loss curve
  ``dy = R*sgn(f)*f^2`` on a bidirectional flow interval, and
* secant/parabola envelopes for one-directional pipes and pump power.

Everything is pure and stateless; :func:`verify_hull` is the sampling oracle
that certifies containment numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SQRT2 = math.sqrt(2.0)
# |f_min|/f_max asymmetry beyond which the tangent lines of the four-line
# envelope stop enclosing the far endpoint of the loss curve.
POLYGON_RATIO_LIMIT = 1.0 + SQRT2


def _bound_prod(u: float, v: float) -> float:
    """Product of bound values with the limit convention 0 * inf = 0."""
    if math.isinf(u) or math.isinf(v):
        if u == 0.0 or v == 0.0:
            return 0.0
        return math.inf if (u > 0) == (v > 0) else -math.inf
    return u * v


@dataclass(frozen=True)
class HullSpec:
    """Coefficients and box of the quadratic-coupling set.

    ``a >= b >= 0`` are the squared-term weights, ``c`` the disc radius
    squared, and the bounds box ``x3`` and ``x4`` (``x4_max`` may be inf).
    """
    a: float
    b: float
    c: float
    x3_min: float
    x3_max: float
    x4_min: float
    x4_max: float

    def __post_init__(self):
        if not (self.a >= self.b >= 0.0):
            raise ValueError(f"need a >= b >= 0, got a={self.a}, b={self.b}")
        if self.c <= 0:
            raise ValueError(f"disc radius squared must be positive, got {self.c}")
        if not (0.0 <= self.x3_min <= self.x3_max):
            raise ValueError("x3 bounds must satisfy 0 <= x3_min <= x3_max")
        if not (0.0 <= self.x4_min <= self.x4_max):
            raise ValueError("x4 bounds must satisfy 0 <= x4_min <= x4_max")
        ac = self.a * self.c
        if not (_bound_prod(self.x3_min, self.x4_min) - 1e-12 <= ac
                <= _bound_prod(self.x3_max, self.x4_max) + 1e-12):
            raise ValueError(
                f"a*c={ac} outside [x3_min*x4_min, x3_max*x4_max]="
                f"[{_bound_prod(self.x3_min, self.x4_min)}, "
                f"{_bound_prod(self.x3_max, self.x4_max)}]"
            )

    @property
    def ac(self) -> float:
        return self.a * self.c


@dataclass(frozen=True)
class LinearCut:
    """Half-space ``k1*x3 + k2*x4 <= d`` (zero weight on x1, x2)."""
    k1: float
    k2: float
    d: float
    case: int

    @property
    def coefficients(self) -> tuple[float, float, float, float]:
        return (0.0, 0.0, self.k1, self.k2)

    def value(self, x3, x4):
        return self.k1 * x3 + self.k2 * x4 - self.d

    def same_halfspace(self, other: "LinearCut", tol=1e-9) -> bool:
        """True when both cuts describe the same plane up to positive scale."""
        u = np.array([self.k1, self.k2, self.d])
        v = np.array([other.k1, other.k2, other.d])
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            return nu == nv
        return bool(np.allclose(u / nu, v / nv, atol=tol))


def hull_cut(spec: HullSpec) -> LinearCut:
    """Select the secant cut that closes the envelope of ``x3*x4 <= a*c``.

    The hyperbola ``x3*x4 = a*c`` crosses the bounds box through two of its
    edges; the cut is the chord between the crossing points.  Which pair of
    edges is crossed depends on how ``a*c`` compares with the cross products
    ``x3_max*x4_min`` and ``x3_min*x4_max``; ties are broken by the first
    matching branch below, and coincide geometrically anyway.
    """
    ac = spec.ac
    hi_lo = _bound_prod(spec.x3_max, spec.x4_min)
    lo_hi = _bound_prod(spec.x3_min, spec.x4_max)
    if hi_lo <= ac <= lo_hi:
        # chord between the left-edge and right-edge crossings
        return LinearCut(ac, spec.x3_min * spec.x3_max,
                         ac * (spec.x3_min + spec.x3_max), case=1)
    if lo_hi <= ac <= hi_lo:
        # chord between the top-edge and bottom-edge crossings
        return LinearCut(spec.x4_min * spec.x4_max, ac,
                         ac * (spec.x4_min + spec.x4_max), case=2)
    if ac >= hi_lo and ac >= lo_hi:
        # hyperbola enters the top edge and leaves the right edge
        return LinearCut(spec.x4_max, spec.x3_max,
                         ac + _bound_prod(spec.x3_max, spec.x4_max), case=3)
    if ac <= hi_lo and ac <= lo_hi:
        # hyperbola enters the left edge and leaves the bottom edge
        return LinearCut(spec.x4_min, spec.x3_min,
                         ac + spec.x3_min * spec.x4_min, case=4)
    raise ValueError(f"a*c={ac} matches no selection branch for {spec}")  # pragma: no cover


@dataclass(frozen=True)
class QuadCut:
    """Half-space ``q2*x2^2 + k3*x3 + k4*x4 <= rhs``."""
    q2: float
    k3: float
    k4: float
    rhs: float

    def value(self, x2, x3, x4):
        return self.q2 * x2 * x2 + self.k3 * x3 + self.k4 * x4 - self.rhs


@dataclass(frozen=True)
class HullBlock:
    """Full envelope of a :class:`HullSpec` as structured constraint parts.

    ``cone`` is ``a*x1^2 + b*x2^2 <= x3*x4``; ``disc`` is ``x1^2+x2^2 <= c``;
    ``cuts`` are the surviving (non-redundant) quadratic side cuts; ``dcut``
    the closing secant; box bounds repeat the spec's.
    """
    spec: HullSpec
    cone: tuple[float, float]
    disc: float
    cuts: tuple[QuadCut, ...]
    dcut: LinearCut

    def violations(self, x1, x2, x3, x4, tol=0.0):
        """Signed residuals (positive = violated) of every envelope part."""
        a, b = self.cone
        out = {
            "cone": a * x1 ** 2 + b * x2 ** 2 - x3 * x4,
            "disc": x1 ** 2 + x2 ** 2 - self.disc,
            "cut_d": self.dcut.value(x3, x4),
            "x3_lo": self.spec.x3_min - x3,
            "x3_hi": x3 - self.spec.x3_max,
            "x4_lo": self.spec.x4_min - x4,
        }
        if math.isfinite(self.spec.x4_max):
            out["x4_hi"] = x4 - self.spec.x4_max
        for i, cut in enumerate(self.cuts):
            out[f"cut_q{i}"] = cut.value(x2, x3, x4)
        return out


def _linear_max_over_cut_box(k3, k4, spec: HullSpec, dcut: LinearCut) -> float:
    """Max of ``k3*x3 + k4*x4`` over the box intersected with the secant cut."""
    from scipy.optimize import linprog

    x4_hi = spec.x4_max if math.isfinite(spec.x4_max) else None
    res = linprog(
        c=[-k3, -k4],
        A_ub=[[dcut.k1, dcut.k2]],
        b_ub=[dcut.d],
        bounds=[(spec.x3_min, spec.x3_max), (spec.x4_min, x4_hi)],
        method="highs",
    )
    if res.status == 3:   # unbounded
        return math.inf
    if not res.success:   # pragma: no cover - tiny LPs should not fail
        return math.inf
    return -res.fun


def hull_constraints(spec: HullSpec) -> HullBlock:
    """Emit the envelope system for ``spec`` with redundant parts dropped.

    The two quadratic side cuts ``(a-b)*x2^2 + x4_min*x3 <= a*c`` and
    ``(a-b)*x2^2 + x3_min*x4 <= a*c`` are omitted when provably implied by
    the disc, the box, and the secant cut (their worst case over that
    superset already satisfies them), which reproduces the compact printed
    forms of the branch-flow and storage instances.
    """
    dcut = hull_cut(spec)
    ab = spec.a - spec.b
    candidates = [
        QuadCut(ab, spec.x4_min, 0.0, spec.ac),
        QuadCut(ab, 0.0, spec.x3_min, spec.ac),
    ]
    kept = []
    for cut in candidates:
        worst = ab * spec.c + _linear_max_over_cut_box(cut.k3, cut.k4, spec, dcut)
        if worst > spec.ac + 1e-12:
            kept.append(cut)
    return HullBlock(spec=spec, cone=(spec.a, spec.b), disc=spec.c,
                     cuts=tuple(kept), dcut=dcut)


# ---------------------------------------------------------------------------
# pipe-loss envelopes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HalfPlane:
    """``dy <= slope*f + intercept`` when sense is "le", ``>=`` for "ge"."""
    slope: float
    intercept: float
    sense: str

    def bound(self, f):
        return self.slope * f + self.intercept

    def violated(self, f, dy, tol=0.0):
        v = dy - self.bound(f)
        return v > tol if self.sense == "le" else -v > tol


@dataclass(frozen=True)
class PolygonRelaxation:
    """Four-line envelope of ``dy = R*sgn(f)*f^2`` over ``[f_min, f_max]``."""
    r_hyd: float
    f_min: float
    f_max: float
    planes: tuple[HalfPlane, ...]

    def upper(self, f):
        return min(p.bound(f) for p in self.planes if p.sense == "le")

    def lower(self, f):
        return max(p.bound(f) for p in self.planes if p.sense == "ge")

    def curve(self, f):
        return self.r_hyd * abs(f) * f

    def contains(self, f, dy, tol=1e-9):
        return self.lower(f) - tol <= dy <= self.upper(f) + tol

    def max_gap(self, num=2001):
        """Measured worst vertical distance envelope-to-curve (both sides)."""
        f = np.linspace(self.f_min, self.f_max, num)
        curve = self.r_hyd * np.abs(f) * f
        ups = np.min([p.slope * f + p.intercept for p in self.planes if p.sense == "le"], axis=0)
        los = np.max([p.slope * f + p.intercept for p in self.planes if p.sense == "ge"], axis=0)
        return float(max((ups - curve).max(), (curve - los).max()))


def pipe_polygon(r_hyd: float, f_min: float, f_max: float) -> PolygonRelaxation:
    """Four half-planes enclosing the signed loss curve of a two-way pipe.

    Each line either passes through an endpoint of the curve or is tangent to
    the opposite branch.  Requires ``f_min < 0 < f_max`` with the asymmetry
    ratio within ``1 + sqrt(2)`` of unity, otherwise a tangent line would cut
    off the far curve endpoint.
    """
    if r_hyd <= 0:
        raise ValueError(f"head-loss coefficient must be positive, got {r_hyd}")
    if not (f_min < 0.0 < f_max):
        raise ValueError(
            f"two-way envelope needs f_min < 0 < f_max, got [{f_min}, {f_max}]; "
            "use parabola_secant for one-directional pipes"
        )
    ratio = max(-f_min / f_max, f_max / -f_min)
    if ratio > POLYGON_RATIO_LIMIT + 1e-12:
        raise ValueError(
            f"flow-bound asymmetry {ratio:.4f} exceeds {POLYGON_RATIO_LIMIT:.4f}; "
            "the four-line envelope would not enclose the curve"
        )
    r, lo, hi = r_hyd, f_min, f_max
    chord = 2.0 * SQRT2 - 2.0
    offs = 3.0 - 2.0 * SQRT2
    planes = (
        # chord through (f_max, r*f_max^2), tangent to the reverse branch
        HalfPlane(chord * r * hi, offs * r * hi * hi, "le"),
        # mirror chord through (f_min, -r*f_min^2), tangent to the forward branch
        HalfPlane(-chord * r * lo, -offs * r * lo * lo, "ge"),
        # tangent at f_max
        HalfPlane(2.0 * r * hi, -r * hi * hi, "ge"),
        # tangent at f_min
        HalfPlane(-2.0 * r * lo, r * lo * lo, "le"),
    )
    return PolygonRelaxation(r_hyd, f_min, f_max, planes)


def parabola_secant(r_hyd: float, f_max: float) -> HalfPlane:
    """Chord bounding ``R*f^2`` from above on ``[0, f_max]``: ``dy <= R*f_max*f``."""
    if f_max <= 0:
        raise ValueError(f"need f_max > 0, got {f_max}")
    if r_hyd <= 0:
        raise ValueError(f"head-loss coefficient must be positive, got {r_hyd}")
    return HalfPlane(r_hyd * f_max, 0.0, "le")


@dataclass(frozen=True)
class PumpPowerHull:
    """Envelope of ``eta*P = a1*f^2 + a0*f`` on ``f in [0, f_max]``.

    ``lower``/``upper`` bound ``eta*P``; both coincide at ``f in {0, f_max}``.
    """
    quad: float
    lin: float
    f_max: float
    eta: float
    secant_slope: float

    def lower(self, f):
        return self.quad * f * f + self.lin * f

    def upper(self, f):
        return self.secant_slope * f


def pump_power_hull(a1: float, a0: float, f_max: float, eta: float) -> PumpPowerHull:
    """Convex lower parabola plus secant upper bound of the pump power curve."""
    if f_max <= 0:
        raise ValueError(f"need f_max > 0, got {f_max}")
    if a1 < 0 or a0 < 0:
        raise ValueError(f"power coefficients must be nonnegative, got a1={a1}, a0={a0}")
    return PumpPowerHull(a1, a0, f_max, eta, a1 * f_max + a0)


# ---------------------------------------------------------------------------
# sampling oracle
# ---------------------------------------------------------------------------

@dataclass
class HullCheck:
    """Containment/tightness report of :func:`verify_hull`."""
    spec: HullSpec
    case: int
    samples: int
    violations: int
    worst_violation: float
    violation_examples: list = field(default_factory=list)
    probes: int = 0
    tight_probes: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0

    @property
    def tightness(self) -> float:
        return self.tight_probes / self.probes if self.probes else float("nan")

    def to_dict(self):
        s = self.spec
        return {
            "spec": {"a": s.a, "b": s.b, "c": s.c,
                     "x3_min": s.x3_min, "x3_max": s.x3_max,
                     "x4_min": s.x4_min,
                     "x4_max": s.x4_max if math.isfinite(s.x4_max) else "inf"},
            "case": self.case,
            "samples": self.samples,
            "violations": self.violations,
            "worst_violation": self.worst_violation,
            "violation_examples": self.violation_examples,
            "probes": self.probes,
            "tight_probes": self.tight_probes,
        }


INFINITE_BOUND_CAP_FACTOR = 10.0   # sampling cap for an unbounded x4, times ac/x3_min


def _sample_cap(spec: HullSpec) -> float:
    if math.isfinite(spec.x4_max):
        return spec.x4_max
    base = spec.ac / spec.x3_min if spec.x3_min > 0 else spec.ac
    return spec.x4_min + INFINITE_BOUND_CAP_FACTOR * max(base, 1.0)


def sample_coupling_set(spec: HullSpec, n: int, rng) -> np.ndarray:
    """Draw ``n`` members of the nonconvex set (columns x1, x2, x3, x4).

    ``x1, x2`` are drawn in the disc (mixing interior and boundary), ``x3``
    uniformly in its box, and ``x4`` solved from the coupling equality;
    draws whose ``x4`` leaves its box (capped when unbounded) are rejected
    and redrawn.
    """
    cap = _sample_cap(spec)
    out = np.empty((0, 4))
    rounds = 0
    while out.shape[0] < n and rounds < 200:
        rounds += 1
        m = max(2 * (n - out.shape[0]), 64)
        theta = rng.uniform(0.0, 2.0 * math.pi, m)
        # half the draws on the disc boundary: extreme couplings live there
        rad = np.sqrt(spec.c) * np.where(rng.random(m) < 0.5, 1.0, np.sqrt(rng.random(m)))
        x1 = rad * np.cos(theta)
        x2 = rad * np.sin(theta)
        x3 = rng.uniform(spec.x3_min, spec.x3_max, m) if spec.x3_max > spec.x3_min \
            else np.full(m, spec.x3_min)
        q = spec.a * x1 ** 2 + spec.b * x2 ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            x4 = np.where(x3 > 0, q / np.where(x3 > 0, x3, 1.0), np.inf)
        keep = (x3 > 0) & (x4 >= spec.x4_min - 1e-15) & (x4 <= cap)
        pts = np.column_stack([x1, x2, x3, x4])[keep]
        out = np.vstack([out, pts])
    return out[:n]


def verify_hull(spec: HullSpec, n: int, seed: int, probes: int = 64,
                tol: float = 1e-9, tight_tol: float = 1e-6) -> HullCheck:
    """Certify numerically that the envelope contains the nonconvex set.

    Samples ``n`` members of the set and checks every envelope constraint to
    ``tol``; any violation is reported with the offending point and
    constraint.  ``probes`` random support directions are then maximized over
    the envelope with the cone solver, counting how many maximizers land back
    on the nonconvex set (within ``tight_tol``) as a tightness measure.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    block = hull_constraints(spec)
    pts = sample_coupling_set(spec, n, rng)

    x1, x2, x3, x4 = (pts[:, i] for i in range(4))
    resid = block.violations(x1, x2, x3, x4)
    worst = 0.0
    bad_mask = np.zeros(pts.shape[0], dtype=bool)
    examples = []
    for name, vals in resid.items():
        vals = np.asarray(vals)
        worst = max(worst, float(vals.max(initial=-math.inf)))
        over = vals > tol
        if over.any():
            bad_mask |= over
            i = int(np.argmax(vals))
            examples.append({"constraint": name, "violation": float(vals[i]),
                             "point": [float(v) for v in pts[i]]})
    check = HullCheck(spec=spec, case=block.dcut.case, samples=pts.shape[0],
                      violations=int(bad_mask.sum()), worst_violation=worst,
                      violation_examples=examples[:10])

    if probes > 0:
        from .socp import solve_cone
        check.probes = probes
        for _ in range(probes):
            d = rng.standard_normal(4)
            d /= np.linalg.norm(d)
            prog = _hull_support_program(block, d)
            res = solve_cone(prog)
            if res.status != "optimal":
                continue
            y1, y2, y3, y4 = res.x[:4]
            gap = abs(spec.a * y1 ** 2 + spec.b * y2 ** 2 - y3 * y4)
            if gap <= tight_tol * max(1.0, spec.ac):
                check.tight_probes += 1
    return check


def _hull_support_program(block: HullBlock, direction):
    """Tiny cone program: maximize ``direction @ x`` over the envelope."""
    from .socp import ConeProgram

    spec = block.spec
    cap = _sample_cap(spec)
    rows_g, rhs_h, dims = [], [], []
    n_lin = 0

    def lin_row(coefs, ub):
        nonlocal n_lin
        rows_g.append(coefs)
        rhs_h.append(ub)
        n_lin += 1

    lin_row([0, 0, -1, 0], -spec.x3_min)
    lin_row([0, 0, 1, 0], spec.x3_max)
    lin_row([0, 0, 0, -1], -spec.x4_min)
    lin_row([0, 0, 0, 1], cap)
    lin_row([0, 0, block.dcut.k1, block.dcut.k2], block.dcut.d)
    soc_rows, soc_rhs = [], []
    # disc: ||(x1, x2)|| <= sqrt(c)
    soc_rows.append([[0, 0, 0, 0], [-1, 0, 0, 0], [0, -1, 0, 0]])
    soc_rhs.append([math.sqrt(spec.c), 0.0, 0.0])
    dims.append(3)
    # rotated cone a*x1^2 + b*x2^2 <= x3*x4
    a, b = block.cone
    rows = [[0, 0, -1, -1], [-2 * math.sqrt(a), 0, 0, 0]]
    rhs = [0.0, 0.0]
    if b > 0:
        rows.append([0, -2 * math.sqrt(b), 0, 0])
        rhs.append(0.0)
    rows.append([0, 0, -1, 1])
    rhs.append(0.0)
    soc_rows.append(rows)
    soc_rhs.append(rhs)
    dims.append(len(rows))
    # quadratic side cuts q2*x2^2 <= rhs - k3*x3 - k4*x4
    for cut in block.cuts:
        if cut.q2 <= 0:
            lin_row([0, 0, cut.k3, cut.k4], cut.rhs)
            continue
        lin = np.array([0.0, 0.0, cut.k3, cut.k4])
        rows = [list(lin), [0, -2 * math.sqrt(cut.q2), 0, 0], list(-lin)]
        rhs = [1.0 + cut.rhs, 0.0, 1.0 - cut.rhs]
        soc_rows.append(rows)
        soc_rhs.append(rhs)
        dims.append(3)

    g = np.array(rows_g, dtype=float)
    h = np.array(rhs_h, dtype=float)
    for rows, rhs in zip(soc_rows, soc_rhs):
        g = np.vstack([g, np.array(rows, dtype=float)])
        h = np.concatenate([h, np.array(rhs, dtype=float)])
    return ConeProgram(
        c=-np.asarray(direction, dtype=float),
        a=np.zeros((0, 4)), b=np.zeros(0),
        g=g, h=h, n_lin=n_lin, soc_dims=tuple(dims),
    )

"""Feasibility cuts, projection bounds and gradient cuts for one period.

Everything here works on the *local vector* of a period,
``v = (x_t, x_{t+1}, y_t, z_t)``, plus the epigraph variable ``w_t``.

For a split of the modes into ``K1`` (with ``lam = sum(z[K1])``) and the
rest ``K2``, the convex hull of the two branches is described with the
scaled branch-0 copy of the next state, ``st = (1 - lam) * sigma``.  Every
bound on ``st`` is affine in ``v``:

    L1 = (1-lam)(lA + f) + E2        U1 = (1-lam)(uA + f) + E2
    L2 = (1-lam) l2                  U2 = (1-lam) u2
    L3 = Ax + E2 + (1-lam) f - lam uA    U3 = Ax + E2 + (1-lam) f - lam lA
    L4 = x2 - lam u2                 U4 = x2 - lam l2

where ``E2`` collects the controls and indicators that only live in branch 0,
``Ax`` is the image of the previous state (extended by the controls shared
by both branches) and ``[lA, uA]`` its interval image.  Pairwise consistency
of these bounds gives the static feasibility cuts; the lower bound on
``w_t`` is

    g(v, st) = sum_i q_i (x2_i - st_i)^2 / lam + q_i st_i^2 / (1-lam)
               + (perspective terms of the branch-only costs),

minimized over ``st``.  Fixing the active bound of each coordinate gives a
smooth convex minorant whose tangent is the gradient cut.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .bounds import interval_image, mode_fix_check
from .model import (CONTROL, EPIGRAPH, FEASIBILITY, GRADIENT, INDICATOR, STATE,
                    ConvexModel, HcpInstance, VarId)

EPS = 1e-6


class SkipCut(Exception):
    """Raised when no cut can be generated at a point."""


class ProjectionInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class LinearCut:
    """``sum coeffs[v] * v >= rhs``."""

    coeffs: dict
    rhs: float
    provenance: str
    t: int
    split: tuple | None = None
    name: str = ""
    violation: float = 0.0

    def value(self, point) -> float:
        return sum(a * point[v] for v, a in self.coeffs.items())

    def slack(self, point) -> float:
        return self.value(point) - self.rhs

    def row(self) -> str:
        terms = " ".join(f"{v}:{a:.6g}" for v, a in sorted(self.coeffs.items()))
        return f"{self.t} {self.provenance} {terms} rhs:{self.rhs:.6g} violation:{self.violation:.6g}"


# ---------------------------------------------------------------------------
# period data and splits


@dataclass(frozen=True)
class PeriodData:
    t: int
    dx: int
    dy: int
    dz: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    f: np.ndarray
    G: np.ndarray
    H: np.ndarray
    q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    lb1: np.ndarray
    ub1: np.ndarray
    lb2: np.ndarray
    ub2: np.ndarray
    exactly_one: bool

    @property
    def m(self) -> int:
        return 2 * self.dx + self.dy + self.dz

    def sl_x1(self):
        return slice(0, self.dx)

    def sl_x2(self):
        return slice(self.dx, 2 * self.dx)

    def sl_y(self):
        return slice(2 * self.dx, 2 * self.dx + self.dy)

    def sl_z(self):
        return slice(2 * self.dx + self.dy, self.m)

    def local_ids(self) -> list:
        t = self.t
        return ([VarId(STATE, t, i) for i in range(self.dx)]
                + [VarId(STATE, t + 1, i) for i in range(self.dx)]
                + [VarId(CONTROL, t, j) for j in range(self.dy)]
                + [VarId(INDICATOR, t, k) for k in range(self.dz)])

    def w_id(self) -> VarId:
        return VarId(EPIGRAPH, self.t, 0)

    def local(self, point) -> np.ndarray:
        return np.array([point[v] for v in self.local_ids()], dtype=float)


def period_data(inst: HcpInstance, t: int) -> PeriodData:
    lb1, ub1 = inst.state_bounds(t)
    lb2, ub2 = inst.state_bounds(t + 1)
    Q2 = inst.Q[t]
    return PeriodData(
        t=t, dx=inst.dx, dy=inst.dy, dz=inst.dz,
        A=inst.A[t - 1], B=inst.B[t - 1], C=inst.C[t - 1], f=inst.f[t - 1],
        G=inst.G[t - 1], H=inst.H[t - 1], q=np.diag(Q2).copy(),
        R=inst.R[t - 1], S=inst.S[t - 1],
        lb1=lb1, ub1=ub1, lb2=lb2, ub2=ub2, exactly_one=bool(inst.mode_exactly_one),
    )


@dataclass(frozen=True)
class DisjunctionSplit:
    """Two-way split of the modes; ``J*`` are control index sets."""

    K1: tuple
    K2: tuple
    J1: tuple
    J2: tuple

    @property
    def shared(self) -> tuple:
        return tuple(sorted(set(self.J1) & set(self.J2)))

    @property
    def J1_only(self) -> tuple:
        return tuple(j for j in self.J1 if j not in self.J2)

    @property
    def J2_only(self) -> tuple:
        return tuple(j for j in self.J2 if j not in self.J1)

    @property
    def key(self) -> tuple:
        return self.K1


def active_controls(G, H, modes) -> tuple:
    """Controls that are not forced to zero when only ``modes`` may be active."""
    G = np.atleast_2d(G)
    H = np.atleast_2d(H)
    return tuple(j for j in range(G.shape[0]) if any(G[j, k] != 0.0 or H[j, k] != 0.0 for k in modes))


def make_split(pd: PeriodData, K1) -> DisjunctionSplit:
    K1 = tuple(sorted(set(int(k) for k in K1)))
    if not K1:
        raise ValueError("K1 must be nonempty")
    if any(k < 0 or k >= pd.dz for k in K1):
        raise ValueError(f"mode index out of range in {K1}")
    K2 = tuple(k for k in range(pd.dz) if k not in K1)
    return DisjunctionSplit(K1, K2, active_controls(pd.G, pd.H, K1), active_controls(pd.G, pd.H, K2))


def enumerate_splits(inst: HcpInstance, t: int, policy="singletons", custom=None) -> list:
    if inst.dz == 1:
        return []
    pd = period_data(inst, t)
    if policy == "singletons":
        return [make_split(pd, (k,)) for k in range(inst.dz)]
    if policy == "custom":
        if not custom:
            raise ValueError("custom split policy needs an explicit list of K1 sets")
        return [make_split(pd, K1) for K1 in custom]
    if policy == "all":
        out = []
        for r in range(1, inst.dz):
            out += [make_split(pd, K1) for K1 in combinations(range(inst.dz), r)]
        return out
    raise ValueError(f"unknown split policy {policy!r}")


# ---------------------------------------------------------------------------
# affine pieces of the scaled projection problem


@dataclass(frozen=True)
class _Geometry:
    """Per-split affine data, shared by cuts and workspaces."""

    pd: PeriodData
    split: DisjunctionSplit | None
    lam: np.ndarray        # lam = lam . v
    E2: np.ndarray         # dx x m
    D1: np.ndarray         # dx x m
    AX: np.ndarray         # dx x m
    lA: np.ndarray
    uA: np.ndarray
    # cost groups (local indices)
    y1: np.ndarray
    y2: np.ndarray
    yplain: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    Rplain: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    S1: np.ndarray
    S2: np.ndarray

    def bounds(self, which: str):
        """Return (coef dx x m, const dx) of candidate bound L1..L4 / U1..U4."""
        pd, lam = self.pd, self.lam
        f = pd.f
        e_x2 = np.zeros((pd.dx, pd.m))
        e_x2[np.arange(pd.dx), pd.dx + np.arange(pd.dx)] = 1.0
        with np.errstate(invalid="ignore"):
            if which == "L1":
                return self.E2 - np.outer(self.lA + f, lam), self.lA + f
            if which == "U1":
                return self.E2 - np.outer(self.uA + f, lam), self.uA + f
            if which == "L2":
                return -np.outer(pd.lb2, lam), pd.lb2.copy()
            if which == "U2":
                return -np.outer(pd.ub2, lam), pd.ub2.copy()
            if which == "L3":
                return self.AX + self.E2 - np.outer(f + self.uA, lam), f.copy()
            if which == "U3":
                return self.AX + self.E2 - np.outer(f + self.lA, lam), f.copy()
            if which == "L4":
                return e_x2 - np.outer(pd.ub2, lam), np.zeros(pd.dx)
            if which == "U4":
                return e_x2 - np.outer(pd.lb2, lam), np.zeros(pd.dx)
        raise KeyError(which)


def _geometry(pd: PeriodData, split: DisjunctionSplit | None) -> _Geometry:
    dx, dy, m = pd.dx, pd.dy, pd.m
    ys, zs, xs1 = pd.sl_y().start, pd.sl_z().start, pd.sl_x1().start
    if split is None:
        if pd.dz != 1:
            raise ValueError("the one-indicator path needs dz = 1")
        K1, K2 = (0,), ()
        J1x, J2x, Sh = active_controls(pd.G, pd.H, (0,)), (), ()
    else:
        K1, K2 = split.K1, split.K2
        J1x, J2x, Sh = split.J1_only, split.J2_only, split.shared
    lam = np.zeros(m)
    lam[[zs + k for k in K1]] = 1.0
    E2 = np.zeros((dx, m))
    D1 = np.zeros((dx, m))
    AX = np.zeros((dx, m))
    for j in J2x:
        E2[:, ys + j] = pd.B[:, j]
    for k in K2:
        E2[:, zs + k] = pd.C[:, k]
    for j in J1x:
        D1[:, ys + j] = pd.B[:, j]
    for k in K1:
        D1[:, zs + k] = pd.C[:, k]
    AX[:, xs1:xs1 + dx] = pd.A
    # controls shared by both branches join the previous state
    Aext = np.hstack([pd.A, pd.B[:, list(Sh)]]) if Sh else pd.A
    lo_ext, hi_ext = list(pd.lb1), list(pd.ub1)
    for j in Sh:
        AX[:, ys + j] = pd.B[:, j]
        modes = range(pd.dz)
        lo = min(pd.G[j, k] for k in modes)
        hi = max(pd.H[j, k] for k in modes)
        if not pd.exactly_one:
            lo, hi = min(lo, 0.0), max(hi, 0.0)
        lo_ext.append(lo)
        hi_ext.append(hi)
    img = interval_image(Aext, np.array(lo_ext), np.array(hi_ext))

    # controls active in no mode are identically zero and carry no cost
    groups = [list(J1x), list(J2x), list(Sh)]
    R = pd.R
    block = all(np.all(R[np.ix_(a, b)] == 0.0) for a in groups for b in groups if a is not b and a and b)
    if block:
        y1, y2, yp = groups
    else:
        y1, y2, yp = [], [], sorted(set(J1x) | set(J2x) | set(Sh))
    return _Geometry(
        pd=pd, split=split, lam=lam, E2=E2, D1=D1, AX=AX, lA=img.lower, uA=img.upper,
        y1=np.array(y1, int), y2=np.array(y2, int), yplain=np.array(yp, int),
        R1=R[np.ix_(y1, y1)], R2=R[np.ix_(y2, y2)], Rplain=R[np.ix_(yp, yp)],
        z1=np.array(K1, int), z2=np.array(K2, int),
        S1=pd.S[np.ix_(K1, K1)], S2=pd.S[np.ix_(K2, K2)],
    )


# ---------------------------------------------------------------------------
# static feasibility cuts

# (name, lower-side terms, upper-side terms): cut reads  sum(upper) - sum(lower) >= 0
_PAIRS_MULTI = {
    "A": ("L1", "U2"),
    "B": ("L2", "U1"),
    "C": ("L1", "U4"),
    "D": ("L4", "U1"),
    "E": ("L2", "U3"),
    "F": ("L3", "U2"),
    "G": ("L4", "U3"),
    "H": ("L3", "U4"),
}


def _pair_rows(geo: _Geometry, name: str):
    """Coefficient rows (dx x m) and constants for cut ``name``: coef.v + const >= 0.

    E and F are stated with the dynamics substituted, so that they involve the
    next state rather than the previous one; G and H likewise use the branch-1
    controls instead of the state pair.  On the dynamics manifold all forms
    agree.
    """
    pd, lam = geo.pd, geo.lam
    f, lA, uA = pd.f, geo.lA, geo.uA
    e_x2 = np.zeros((pd.dx, pd.m))
    e_x2[np.arange(pd.dx), pd.dx + np.arange(pd.dx)] = 1.0
    if name == "E":  # x2 - D1 - lam (lA+f) - (1-lam) l2 >= 0
        return e_x2 - geo.D1 - np.outer(lA + f - pd.lb2, lam), -pd.lb2
    if name == "F":  # D1 + lam (uA+f) + (1-lam) u2 - x2 >= 0
        return geo.D1 - e_x2 + np.outer(uA + f - pd.ub2, lam), pd.ub2.copy()
    if name == "G":  # lam u2 - D1 - lam (lA+f) >= 0
        return np.outer(pd.ub2 - lA - f, lam) - geo.D1, np.zeros(pd.dx)
    if name == "H":  # D1 + lam (uA+f) - lam l2 >= 0
        return geo.D1 + np.outer(uA + f - pd.lb2, lam), np.zeros(pd.dx)
    lo, hi = _PAIRS_MULTI[name]
    cl, kl = geo.bounds(lo)
    cu, ku = geo.bounds(hi)
    return cu - cl, ku - kl


def _rows_to_cuts(geo: _Geometry, name: str, label: str, tol=1e-14) -> list:
    coef, const = _pair_rows(geo, name)
    ids = geo.pd.local_ids()
    split = geo.split.K1 if geo.split is not None else None
    out = []
    for i in range(geo.pd.dx):
        row, c = coef[i], const[i]
        if not (np.all(np.isfinite(row)) and np.isfinite(c)):
            continue
        nz = np.flatnonzero(np.abs(row) > tol)
        if nz.size == 0:
            continue
        coeffs = {ids[j]: float(row[j]) for j in nz}
        out.append(LinearCut(coeffs, float(-c), FEASIBILITY, geo.pd.t, split, f"{label}[{i}]"))
    return out


def feasibility_cuts_1d(pd: PeriodData) -> list:
    """The six static cuts (c)-(h) of a one-indicator period, per state coordinate."""
    geo = _geometry(pd, None)
    out = []
    for name in "CDEFGH":
        out += _rows_to_cuts(geo, name, name.lower())
    return out


def feasibility_cuts_multi(split: DisjunctionSplit, pd: PeriodData) -> list:
    """The eight static cuts (A)-(H) of a split, per state coordinate."""
    geo = _geometry(pd, split)
    out = []
    for name in "ABCDEFGH":
        out += _rows_to_cuts(geo, name, name)
    return out


# ---------------------------------------------------------------------------
# projection problem


def _lam_of(geo: _Geometry, v: np.ndarray) -> float:
    return float(geo.lam @ v)


def _candidate_values(geo: _Geometry, v: np.ndarray) -> dict:
    vals = {}
    for name in ("L1", "L2", "L3", "L4", "U1", "U2", "U3", "U4"):
        coef, const = geo.bounds(name)
        with np.errstate(invalid="ignore"):
            val = np.where(np.isfinite(const) & np.all(np.isfinite(coef), axis=1),
                           np.nan_to_num(coef) @ v + np.nan_to_num(const), np.nan)
        if name.startswith("L"):
            val = np.where(np.isnan(val), -np.inf, val)
        else:
            val = np.where(np.isnan(val), np.inf, val)
        vals[name] = val
    return vals


def projection_bounds(point, pd: PeriodData, split: DisjunctionSplit | None = None, eps: float = EPS):
    """Bounds ``(lo, hi)`` on the branch-0 next state at a relaxation point."""
    geo = _geometry(pd, split)
    v = point if isinstance(point, np.ndarray) else pd.local(point)
    return _projection_bounds(geo, v, eps)


def _projection_bounds(geo: _Geometry, v: np.ndarray, eps: float):
    lam = _lam_of(geo, v)
    if not (eps <= lam <= 1.0 - eps):
        raise SkipCut(f"lambda {lam:.3g} outside [{eps}, {1 - eps}]")
    vals = _candidate_values(geo, v)
    lo = np.max([vals[k] for k in ("L1", "L2", "L3", "L4")], axis=0) / (1.0 - lam)
    hi = np.min([vals[k] for k in ("U1", "U2", "U3", "U4")], axis=0) / (1.0 - lam)
    return lo, hi


def tau_closed_form(x2, lo, hi, q):
    """Minimize sum q_i (x2_i - s_i)^2 over the box [lo, hi]; returns (tau, s)."""
    x2 = np.atleast_1d(np.asarray(x2, float))
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    q = np.asarray(q, float)
    q = np.diag(q) if q.ndim == 2 else np.broadcast_to(q, x2.shape)
    if np.any(lo > hi):
        raise ProjectionInfeasible(f"empty projection interval in coordinate(s) {np.flatnonzero(lo > hi).tolist()}")
    s = np.clip(x2, lo, hi)
    return float(np.sum(q * (x2 - s) ** 2)), s


# ---------------------------------------------------------------------------
# workspace, nonlinear cut and its gradient

INSIDE, BELOW_CONST, BELOW_FRAC, ABOVE_CONST, ABOVE_FRAC, NO_CUT = (
    "inside", "below-const", "below-frac", "above-const", "above-frac", "no-cut")


@dataclass
class CutWorkspace:
    pd: PeriodData
    split: DisjunctionSplit | None
    v: np.ndarray
    lam: float
    lo: np.ndarray
    hi: np.ndarray
    sigma: np.ndarray
    tau: float
    mu: float
    cases: list
    pieces: list = field(default_factory=list)  # per coordinate: (side, coef, const) or None
    geo: _Geometry | None = None

    @property
    def x2(self) -> np.ndarray:
        return self.v[self.pd.sl_x2()]


def select_sigma_case(point, pd: PeriodData, split: DisjunctionSplit | None = None,
                      eps: float = EPS, tol: float = 1e-12) -> CutWorkspace:
    """Pick, per coordinate, the active bound of the projection problem."""
    geo = _geometry(pd, split)
    v = point.copy() if isinstance(point, np.ndarray) else pd.local(point)
    lam = _lam_of(geo, v)
    dx = pd.dx
    x2 = v[pd.sl_x2()]
    if lam > 1.0 - eps and lam <= 1.0 + 1e-12:
        # boundary point: only the perspective part is defined
        cases = [INSIDE] * dx
        ws = CutWorkspace(pd, split, v, lam, np.full(dx, -np.inf), np.full(dx, np.inf), x2.copy(),
                          0.0, 0.0, cases, [None] * dx, geo)
        ws.mu = mu_eval(ws, v)
        return ws
    lo, hi = _projection_bounds(geo, v, eps)
    vals = _candidate_values(geo, v)
    sbar = (1.0 - lam) * x2
    lA_f, uA_f = geo.lA + pd.f, geo.uA + pd.f
    cases, pieces = [], []
    for i in range(dx):
        L1, L3 = vals["L1"][i], vals["L3"][i]
        U1, U3 = vals["U1"][i], vals["U3"][i]
        case, piece = INSIDE, None
        if sbar[i] < max(L1, L3) - tol * (1 + abs(sbar[i])):
            if L1 >= L3:
                # constant branch; needs the image bound to dominate the state bound
                case = BELOW_CONST if (lA_f[i] >= pd.lb2[i] or split is not None) else NO_CUT
                piece = ("lower", "L1")
            else:
                case = BELOW_FRAC
                piece = ("lower", "L3")
        elif sbar[i] > min(U1, U3) + tol * (1 + abs(sbar[i])):
            if U1 <= U3:
                case = ABOVE_CONST if (uA_f[i] <= pd.ub2[i] or split is not None) else NO_CUT
                piece = ("upper", "U1")
            else:
                case = ABOVE_FRAC
                piece = ("upper", "U3")
        if case == NO_CUT:
            piece = None
        if piece is not None:
            coef, const = geo.bounds(piece[1])
            if not (np.all(np.isfinite(coef[i])) and np.isfinite(const[i])):
                case, piece = NO_CUT, None
            else:
                piece = (piece[0], coef[i].copy(), float(const[i]))
        cases.append(case)
        pieces.append(piece)
    st = np.array([_piece_value(p, sbar[i], v) for i, p in enumerate(pieces)])
    sigma = st / (1.0 - lam)
    tau = float(np.sum(pd.q * (x2 - sigma) ** 2))
    ws = CutWorkspace(pd, split, v, lam, lo, hi, sigma, tau, 0.0, cases, pieces, geo)
    ws.mu = mu_eval(ws, v)
    return ws


def _piece_value(piece, sbar_i, v):
    if piece is None:
        return sbar_i
    side, coef, const = piece
    b = coef @ v + const
    return max(b, sbar_i) if side == "lower" else min(b, sbar_i)


def _perspective(ws: CutWorkspace, v: np.ndarray, lam: float):
    """Value and gradient of the branch-only cost terms."""
    geo, pd = ws.geo, ws.pd
    y = v[pd.sl_y()]
    z = v[pd.sl_z()]
    ys, zs = pd.sl_y().start, pd.sl_z().start
    grad = np.zeros(pd.m)
    val = 0.0
    if geo.yplain.size:
        yp = y[geo.yplain]
        val += float(yp @ geo.Rplain @ yp)
        grad[ys + geo.yplain] += 2.0 * geo.Rplain @ yp
    e_lam = geo.lam
    for idx_y, Ry, idx_z, Sz, den, dden in (
        (geo.y1, geo.R1, geo.z1, geo.S1, lam, e_lam),
        (geo.y2, geo.R2, geo.z2, geo.S2, 1.0 - lam, -e_lam),
    ):
        yy = y[idx_y] if idx_y.size else np.zeros(0)
        zz = z[idx_z] if idx_z.size else np.zeros(0)
        num = float(yy @ Ry @ yy) if yy.size else 0.0
        num += float(zz @ Sz @ zz) if zz.size else 0.0
        gnum = np.zeros(pd.m)
        if yy.size:
            gnum[ys + idx_y] = 2.0 * Ry @ yy
        if zz.size:
            gnum[zs + idx_z] = 2.0 * Sz @ zz
        if den <= 0.0:
            if abs(num) > 0.0:
                return np.inf, grad
            continue
        val += num / den
        grad += gnum / den - num * dden / den ** 2
    return val, grad


def mu_eval(ws: CutWorkspace, v) -> float:
    """Nonlinear cut with the active bounds of ``ws`` frozen, evaluated at ``v``.

    The function is convex, bounded above by the hull value, equal to the
    nonlinear cut at the generation point, and equal to the original
    epigraph right-hand side at integral indicator values.
    """
    v = np.asarray(v, float) if isinstance(v, np.ndarray) else ws.pd.local(v)
    lam = _lam_of(ws.geo, v)
    if lam <= 0.0:
        raise ValueError(f"indicator weight {lam} outside (0, 1]")
    if lam > 1.0 + 1e-12:
        raise ValueError(f"indicator weight {lam} outside (0, 1]")
    lam = min(lam, 1.0)
    pd = ws.pd
    x2 = v[pd.sl_x2()]
    val, _ = _perspective(ws, v, lam)
    for i in range(pd.dx):
        q = pd.q[i]
        if q == 0.0:
            continue
        sbar = (1.0 - lam) * x2[i]
        st = _piece_value(ws.pieces[i], sbar, v)
        if st == sbar:
            val += q * x2[i] ** 2
        elif lam >= 1.0:
            return np.inf
        else:
            val += q * ((x2[i] - st) ** 2 / lam + st ** 2 / (1.0 - lam))
    return float(val)


def mu_grad(ws: CutWorkspace, v) -> np.ndarray:
    """Gradient of :func:`mu_eval` with respect to the local vector."""
    v = np.asarray(v, float) if isinstance(v, np.ndarray) else ws.pd.local(v)
    lam = _lam_of(ws.geo, v)
    if not (0.0 < lam <= 1.0 + 1e-12):
        raise ValueError(f"indicator weight {lam} outside (0, 1]")
    lam = min(lam, 1.0)
    pd = ws.pd
    x2 = v[pd.sl_x2()]
    _, grad = _perspective(ws, v, lam)
    e_lam = ws.geo.lam
    for i in range(pd.dx):
        q = pd.q[i]
        if q == 0.0:
            continue
        col = pd.dx + i
        sbar = (1.0 - lam) * x2[i]
        piece = ws.pieces[i]
        st = _piece_value(piece, sbar, v)
        if piece is None or st == sbar or lam >= 1.0:
            grad[col] += 2.0 * q * x2[i]
            continue
        dst = piece[1]
        d = x2[i] - st
        dd = -dst.copy()
        dd[col] += 1.0
        grad += q * (2.0 * d * dd / lam - d ** 2 * e_lam / lam ** 2
                     + 2.0 * st * dst / (1.0 - lam) + st ** 2 * e_lam / (1.0 - lam) ** 2)
    return grad


def perspective_value(ws: CutWorkspace, v) -> float:
    """Perspective-only lower bound (all coordinates inside)."""
    v = np.asarray(v, float)
    lam = min(_lam_of(ws.geo, v), 1.0)
    x2 = v[ws.pd.sl_x2()]
    val, _ = _perspective(ws, v, lam)
    return float(val + np.sum(ws.pd.q * x2 ** 2))


def gradient_cut(ws: CutWorkspace, drop_tol: float = 0.0) -> LinearCut:
    """Tangent of the nonlinear cut at the generation point: w >= mu + g.(v - v0)."""
    g = mu_grad(ws, ws.v)
    if not np.all(np.isfinite(g)) or not np.isfinite(ws.mu):
        raise SkipCut("non-finite cut data")
    ids = ws.pd.local_ids()
    coeffs = {ws.pd.w_id(): 1.0}
    for j in np.flatnonzero(np.abs(g) > drop_tol):
        coeffs[ids[j]] = -float(g[j])
    rhs = float(ws.mu - g @ ws.v)
    split = ws.split.K1 if ws.split is not None else None
    return LinearCut(coeffs, rhs, GRADIENT, ws.pd.t, split, "grad")


def variable_box(inst: HcpInstance, vid: VarId) -> tuple[float, float]:
    """Global bounds of one variable implied by the instance data."""
    if vid.kind == STATE:
        lo, hi = inst.state_bounds(vid.t)
        return float(lo[vid.index]), float(hi[vid.index])
    if vid.kind == CONTROL:
        g, h = inst.G[vid.t - 1][vid.index], inst.H[vid.t - 1][vid.index]
        lo, hi = float(np.min(g)), float(np.max(h))
        if not inst.mode_exactly_one:
            lo, hi = min(lo, 0.0), max(hi, 0.0)
        return lo, hi
    if vid.kind == INDICATOR:
        return 0.0, 1.0
    return 0.0, np.inf


def tidy_cut(cut: LinearCut, inst: HcpInstance, rel: float = 1e-9) -> LinearCut:
    """Drop coefficients below ``rel`` times the largest one.

    Each dropped term a*v is replaced by its largest value over the variable's
    box, which can only weaken the cut, so validity is kept.
    """
    big = max(abs(a) for a in cut.coeffs.values())
    coeffs, rhs = {}, cut.rhs
    for vid, a in cut.coeffs.items():
        if a == 0.0:
            continue
        if abs(a) <= rel * big and vid.kind != EPIGRAPH:
            lo, hi = variable_box(inst, vid)
            worst = max(a * lo, a * hi)
            if np.isfinite(worst):
                rhs -= worst
                continue
        coeffs[vid] = a
    if len(coeffs) == len(cut.coeffs):
        return cut
    return LinearCut(coeffs, rhs, cut.provenance, cut.t, cut.split, cut.name, cut.violation)


# ---------------------------------------------------------------------------
# separation


@dataclass(frozen=True)
class CutConfig:
    eps: float = EPS
    min_violation: float = 1e-7
    improve_rel: float = 1e-6
    improve_abs: float = 1e-6
    split_policy: str = "singletons"
    custom_splits: tuple | None = None


@dataclass
class SeparationState:
    """Gradient cuts emitted so far, keyed by (period, split)."""

    emitted: dict = field(default_factory=dict)

    def best_bound(self, key, point) -> float:
        best = -np.inf
        for cut in self.emitted.get(key, ()):
            w_id = next(v for v in cut.coeffs if v.kind == EPIGRAPH)
            # cut: w - sum g v >= rhs  ->  bound on w is rhs + sum g v
            best = max(best, cut.rhs - (cut.value(point) - point[w_id]))
        return best

    def record(self, key, cut):
        self.emitted.setdefault(key, []).append(cut)


def _period_splits(inst, t, config: CutConfig):
    if inst.dz == 1:
        return [None]
    return enumerate_splits(inst, t, config.split_policy, config.custom_splits)


def separate(point, model: ConvexModel | None, inst: HcpInstance, config: CutConfig | None = None,
             state: SeparationState | None = None, periods=None) -> list:
    """Gradient cuts violated at a relaxation point, one per period and split at most."""
    config = config or CutConfig()
    state = state if state is not None else SeparationState()
    out = []
    for t in (periods or range(1, inst.n + 1)):
        pd = period_data(inst, t)
        if model is not None and inst.dz == 1:
            j = model.col(VarId(INDICATOR, t, 0))
            if model.lb[j] == model.ub[j]:
                continue
        v = pd.local(point)
        w_bar = point[pd.w_id()]
        for split in _period_splits(inst, t, config):
            try:
                ws = select_sigma_case(v, pd, split, config.eps)
                if ws.lam > 1.0 - config.eps:
                    continue
                cut = tidy_cut(gradient_cut(ws), inst)
            except (SkipCut, ProjectionInfeasible):
                continue
            key = (t, split.key if split is not None else None)
            mu_prev = max(w_bar, state.best_bound(key, point))
            mu_new = cut.rhs - (cut.value(point) - w_bar)
            viol = mu_new - w_bar
            if mu_new >= (1.0 + config.improve_rel) * mu_prev + config.improve_abs and viol > config.min_violation:
                cut = LinearCut(cut.coeffs, cut.rhs, cut.provenance, cut.t, cut.split, cut.name, float(viol))
                state.record(key, cut)
                out.append(cut)
    return out


def static_cuts(inst: HcpInstance, config: CutConfig | None = None, skip_periods=()) -> list:
    """All feasibility cuts of an instance, with exact duplicates removed."""
    config = config or CutConfig()
    out, seen = [], set()
    for t in range(1, inst.n + 1):
        if t in skip_periods:
            continue
        pd = period_data(inst, t)
        if inst.dz == 1:
            cuts = feasibility_cuts_1d(pd)
        else:
            cuts = []
            for split in enumerate_splits(inst, t, config.split_policy, config.custom_splits):
                cuts += feasibility_cuts_multi(split, pd)
        for c in cuts:
            c = tidy_cut(c, inst)
            key = (tuple(sorted((v, round(a, 12)) for v, a in c.coeffs.items())), round(c.rhs, 12))
            if key in seen:
                continue
            seen.add(key)
            out.append(c)
    return out


def mode_fixes(inst: HcpInstance) -> list:
    """Periods whose single indicator must be 1."""
    if inst.dz != 1:
        return []
    fixed = []
    for t in range(1, inst.n + 1):
        pd = period_data(inst, t)
        if mode_fix_check(pd.A, pd.f, pd.lb1, pd.ub1, pd.lb2, pd.ub2).fix:
            fixed.append(t)
    return fixed

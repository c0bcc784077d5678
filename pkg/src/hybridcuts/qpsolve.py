"""Convex relaxation solver.

The relaxations are quadratic programs with extra rotated second-order cone
rows for the epigraph constraints ``v'Pv <= w``.  They are handed to the
Clarabel interior-point solver (with its Ruiz equilibration enabled); this
module owns the conic assembly, the unscaled residual checks and the
status mapping.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import clarabel
import numpy as np
from scipy import sparse
import scipy.sparse.linalg  # noqa: F401  (registers sparse.linalg)

from .model import ConvexModel, VarId

OPTIMAL, INFEASIBLE, ITERATION_LIMIT = "optimal", "infeasible", "iteration-limit"

_EIG_TOL = 1e-13


@dataclass
class RelaxPoint:
    var_ids: tuple
    x: np.ndarray
    objective: float
    status: str
    primal_res: float = np.nan
    dual_res: float = np.nan
    gap: float = np.nan
    data_norm: float = 1.0
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    def __getitem__(self, v: VarId) -> float:
        return float(self.x[self._index[v]])

    @property
    def _index(self):
        idx = self.extra.get("_index")
        if idx is None:
            idx = {v: i for i, v in enumerate(self.var_ids)}
            self.extra["_index"] = idx
        return idx

    @property
    def values(self) -> dict:
        return {v: float(a) for v, a in zip(self.var_ids, self.x)}

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    max_iter: int = 200
    polish: bool = True


class _Static:
    """Bound-independent part of the conic form, cached per model.

    With ``fold`` set, every epigraph ``v'Pv <= w`` is tight at an optimum and
    no linear row mentions ``w``, so ``w`` is pinned to zero and ``v'Pv`` moves
    into the objective; the problem becomes a plain QP.
    """

    def __init__(self, model: ConvexModel, fold: bool = False):
        n = model.nvar
        self.fold = fold
        obj_P = model.obj_P
        self.q = np.asarray(model.obj_c, float).copy()
        self.w_cols = np.array([e.w for e in model.epigraphs], dtype=int)
        if fold:
            extra = sparse.lil_matrix((n, n))
            for e in model.epigraphs:
                M = 0.5 * (e.P + e.P.T)
                for a, ca in enumerate(e.cols):
                    for b, cb in enumerate(e.cols):
                        if M[a, b] != 0.0:
                            extra[ca, cb] += 2.0 * M[a, b]
                # w keeps its unit cost but is pinned to zero during the solve
            obj_P = (obj_P + extra.tocsr()).tocsc()
        self.P = sparse.triu(obj_P, format="csc")
        rows, lo, hi = model.rows.tocsr(), model.row_lo, model.row_hi
        eq = np.isfinite(lo) & np.isfinite(hi) & (lo == hi)
        up = np.isfinite(hi) & ~eq
        dn = np.isfinite(lo) & ~eq
        self.A_eq, self.b_eq = rows[eq], hi[eq]
        self.A_in = sparse.vstack([rows[up], -rows[dn]], format="csr")
        self.b_in = np.concatenate([hi[up], -lo[dn]])
        # epigraph rows: ||(2Fv, w-1)|| <= w+1  <=>  |Fv|^2 <= w
        blocks, rhs, dims, lin_rows = [], [], [], []
        for e in ([] if fold else model.epigraphs):
            M = 0.5 * (e.P + e.P.T)
            ev, U = np.linalg.eigh(M)
            keep = ev > _EIG_TOL * max(1.0, float(np.abs(ev).max(initial=0.0)))
            F = (np.sqrt(ev[keep])[:, None] * U[:, keep].T)
            k = F.shape[0]
            if k == 0:
                lin_rows.append(e.w)  # 0 <= w
                continue
            blk = sparse.lil_matrix((k + 2, n))
            blk[0, e.w] = -1.0
            blk[1, e.w] = -1.0
            for r in range(k):
                for c, col in enumerate(e.cols):
                    if F[r, c] != 0.0:
                        blk[2 + r, col] = -2.0 * F[r, c]
            blocks.append(blk.tocsr())
            rhs.append(np.concatenate([[1.0, -1.0], np.zeros(k)]))
            dims.append(k + 2)
        if lin_rows:
            extra = sparse.csr_matrix((-np.ones(len(lin_rows)), (np.arange(len(lin_rows)), lin_rows)),
                                      shape=(len(lin_rows), n))
            self.A_in = sparse.vstack([self.A_in, extra], format="csr")
            self.b_in = np.concatenate([self.b_in, np.zeros(len(lin_rows))])
        self.A_soc = sparse.vstack(blocks, format="csr") if blocks else sparse.csr_matrix((0, n))
        self.b_soc = np.concatenate(rhs) if rhs else np.zeros(0)
        self.soc_dims = dims
        self.n = n
        self.coo = {k: sparse.coo_matrix(M) for k, M in
                    (("eq", self.A_eq), ("in", self.A_in), ("soc", self.A_soc))}

    def assemble(self, fixed, up, dn):
        """Constraint matrix rows: equalities, fixed variables, inequalities, upper and
        lower variable bounds, cones."""
        parts_r, parts_c, parts_v = [], [], []
        off = 0

        def add(r, c, v, nrows):
            nonlocal off
            parts_r.append(np.asarray(r) + off)
            parts_c.append(np.asarray(c))
            parts_v.append(np.asarray(v, float))
            off += nrows

        for key, idx, sign in (("eq", None, 0), (None, fixed, 1.0), ("in", None, 0),
                               (None, up, 1.0), (None, dn, -1.0), ("soc", None, 0)):
            if key is not None:
                M = self.coo[key]
                add(M.row, M.col, M.data, M.shape[0])
            else:
                cols = np.flatnonzero(idx)
                add(np.arange(cols.size), cols, np.full(cols.size, sign), cols.size)
        r = np.concatenate(parts_r)
        c = np.concatenate(parts_c)
        v = np.concatenate(parts_v)
        return sparse.csc_matrix((v, (r, c)), shape=(off, self.n))


def _scale_rows(A, b, n_lin):
    """Divide linear rows whose right-hand side dwarfs their coefficients.

    The interior-point start stalls on rows such as ``w >= -1e5``; row
    equilibration only looks at the matrix, so the rhs is balanced here.
    """
    if n_lin == 0:
        return A, b
    rowmax = np.zeros(A.shape[0])
    np.maximum.at(rowmax, A.indices, np.abs(A.data))
    d = np.ones(A.shape[0])
    lin = slice(0, n_lin)
    big = np.abs(b[lin]) > rowmax[lin]
    d[lin][big] = rowmax[lin][big] / np.abs(b[lin][big])
    if np.all(d == 1.0):
        return A, b
    return (sparse.diags(d) @ A).tocsc(), b * d


def _polish(P, q, A, b, n_eq, n_in, x, z, reg=1e-10, refine=5):
    """Active-set refinement of an interior-point solution of a pure QP.

    Rows whose multiplier exceeds their slack are treated as equalities and the
    reduced KKT system is solved with a small regularization plus iterative
    refinement.  Returns ``(x, z)`` or ``None`` when the refined point is not
    primal and dual feasible.
    """
    m = A.shape[0]
    slack = b - A @ x
    active = np.zeros(m, bool)
    active[:n_eq] = True
    ineq = slice(n_eq, n_eq + n_in)
    active[ineq] = z[ineq] > slack[ineq]
    idx = np.flatnonzero(active)
    Aa = A[idx]
    n, k = A.shape[1], idx.size
    Pf = (P + P.T - sparse.diags(P.diagonal())).tocsc()
    K = sparse.bmat([[Pf + reg * sparse.identity(n), Aa.T], [Aa, -reg * sparse.identity(k)]], format="csc")
    K0 = sparse.bmat([[Pf, Aa.T], [Aa, None]], format="csc")
    rhs = np.concatenate([-q, b[idx]])
    try:
        lu = sparse.linalg.splu(K)
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    for _ in range(refine):
        sol += lu.solve(rhs - K0 @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    xp, za = sol[:n], sol[n:]
    zp = np.zeros(m)
    zp[idx] = za
    tol = 1e-9 * (1.0 + np.abs(b))
    sp = b - A @ xp
    if np.any(sp[ineq] < -tol[ineq]) or np.any(zp[ineq] < -1e-9 * (1.0 + np.abs(z[ineq]))):
        return None
    zp[ineq] = np.maximum(zp[ineq], 0.0)
    return xp, zp


def _foldable(model: ConvexModel, lb, ub) -> bool:
    if not model.epigraphs:
        return False
    w = np.array([e.w for e in model.epigraphs], dtype=int)
    if model.rows.shape[0] and model.rows.tocsc()[:, w].nnz:
        return False
    return bool(np.all(np.isposinf(ub[w])) and np.all(lb[w] <= 0.0))


def _static(model: ConvexModel, fold: bool = False) -> _Static:
    key = "_conic_folded" if fold else "_conic"
    st = model.meta.get(key)
    if st is None:
        st = _Static(model, fold)
        model.meta[key] = st
    return st


def _data_norm(st: _Static, lb, ub) -> float:
    parts = [np.abs(st.q).max(initial=0.0)]
    for M in (st.P, st.A_eq, st.A_in):
        if M.nnz:
            parts.append(np.abs(M.data).max())
    for b in (st.b_eq, st.b_in, lb[np.isfinite(lb)], ub[np.isfinite(ub)]):
        if b.size:
            parts.append(np.abs(b).max())
    return float(max(parts))


def solve_relaxation(model: ConvexModel, lb=None, ub=None, settings: SolverSettings | None = None) -> RelaxPoint:
    """Solve the continuous relaxation (integrality marks dropped).

    ``lb``/``ub`` override the model's variable bounds, which lets branch and
    bound reuse the cached conic data of a single model.
    """
    settings = settings or SolverSettings()
    lb = model.lb if lb is None else np.asarray(lb, float)
    ub = model.ub if ub is None else np.asarray(ub, float)
    n = model.nvar
    if np.any(lb > ub + 1e-12):
        return RelaxPoint(model.var_ids, np.full(n, np.nan), np.inf, INFEASIBLE)
    fold = model.meta.get("_foldable")
    if fold is None:
        fold = model.meta["_foldable"] = _foldable(model, model.lb, model.ub)
    fold = fold and _foldable_bounds(model, lb, ub)
    st = _static(model, fold)
    if fold:
        lb, ub = lb.copy(), ub.copy()
        lb[st.w_cols] = ub[st.w_cols] = 0.0

    fixed = np.isfinite(lb) & (lb >= ub)
    up = np.isfinite(ub) & ~fixed
    dn = np.isfinite(lb) & ~fixed
    A = st.assemble(fixed, up, dn)
    b = np.concatenate([st.b_eq, lb[fixed], st.b_in, ub[up], -lb[dn], st.b_soc])
    n_eq = st.A_eq.shape[0] + int(fixed.sum())
    n_in = st.A_in.shape[0] + int(up.sum()) + int(dn.sum())
    A, b = _scale_rows(A, b, n_eq + n_in)
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_in:
        cones.append(clarabel.NonnegativeConeT(n_in))
    cones += [clarabel.SecondOrderConeT(d) for d in st.soc_dims]

    opts = clarabel.DefaultSettings()
    opts.verbose = False
    opts.max_iter = settings.max_iter
    opts.tol_gap_abs = settings.tol
    opts.tol_gap_rel = settings.tol
    opts.tol_feas = settings.tol
    opts.tol_ktratio = 1e-8
    opts.max_threads = 1
    opts.presolve_enable = False
    solver = clarabel.DefaultSolver(st.P, st.q, A, b, cones, opts)
    sol = solver.solve()
    status = str(sol.status)
    x = np.array(sol.x, dtype=float)
    zd = np.array(sol.z, dtype=float)
    norm = _data_norm(st, lb, ub)

    if "PrimalInfeasible" in status:
        return RelaxPoint(model.var_ids, x, np.inf, INFEASIBLE, data_norm=norm, iterations=sol.iterations)
    polished = False
    if settings.polish and not st.soc_dims and status in ("Solved", "AlmostSolved"):
        out = _polish(st.P, st.q, A, b, n_eq, n_in, x, zd)
        if out is not None:
            x, zd = out
            polished = True

    Px = st.P @ x + st.P.T @ x - st.P.diagonal() * x
    dual = float(np.max(np.abs(Px + st.q + A.T @ zd), initial=0.0))
    pobj = 0.5 * x @ Px + st.q @ x
    dobj = -0.5 * x @ Px - b @ zd
    gap = abs(pobj - dobj) / max(1.0, abs(pobj))
    if fold:
        for e in model.epigraphs:
            v = x[e.cols]
            x[e.w] = float(v @ e.P @ v)
        fixed[st.w_cols] = False
    obj = model.objective(x)
    primal = model.max_violation(np.where(fixed, lb, x))
    pt = RelaxPoint(model.var_ids, x, obj, OPTIMAL, primal, dual, gap, norm, sol.iterations)
    pt.extra["duals"] = zd
    pt.extra["gap_abs"] = abs(pobj - dobj)
    pt.extra["polished"] = polished
    if status not in ("Solved", "AlmostSolved"):
        pt.status = ITERATION_LIMIT
    elif not _contract_ok(pt):
        pt.status = ITERATION_LIMIT
    if pt.status == OPTIMAL:
        # snap fixed variables exactly
        pt.x = np.where(fixed, lb, x)
    return pt


def _foldable_bounds(model: ConvexModel, lb, ub) -> bool:
    w = [e.w for e in model.epigraphs]
    return bool(np.all(np.isposinf(ub[w])) and np.all(lb[w] <= 0.0))


def _contract_ok(pt: RelaxPoint, tol: float = 1e-8) -> bool:
    scale = tol * (1.0 + pt.data_norm)
    return pt.primal_res <= scale and pt.dual_res <= scale and pt.gap <= tol


def warm_start(model: ConvexModel, base: RelaxPoint, lb=None, ub=None, settings=None) -> RelaxPoint:
    """Re-solve a model related to ``base``'s.

    The interior-point backend has no warm-start facility, so the base point is
    only checked for compatibility; the returned optimum is that of a cold
    solve.
    """
    if len(base.var_ids) != model.nvar or tuple(base.var_ids) != tuple(model.var_ids):
        raise ValueError("warm-start base does not match the model's variables")
    return solve_relaxation(model, lb, ub, settings)

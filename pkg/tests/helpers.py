"""Instance generators and brute-force oracles shared by the tests."""
from __future__ import annotations

import itertools

import numpy as np

from hybridcuts.model import HcpInstance, build_epigraph, fix_variable, VarId, INDICATOR
from hybridcuts.qpsolve import solve_relaxation


def scalar_instance(a=1.0, b=1.0, c=0.0, l1=0.0, u1=1.0, l2=0.0, u2=1.0, q1=0.0, q2=2.0,
                    r=0.01, s=1.0, f=0.0, g=-1.0, h=1.0, x_init=None):
    one = lambda v: np.array([[float(v)]])
    return HcpInstance(
        n=1, dx=1, dy=1, dz=1, Q=[one(q1), one(q2)], R=[one(r)], S=[one(s)], A=[one(a)],
        B=[one(b)], C=[one(c)], f=[np.array([float(f)])], G=[one(g)], H=[one(h)],
        lb=[np.array([float(l1)]), np.array([float(l2)])],
        ub=[np.array([float(u1)]), np.array([float(u2)])],
        x_init=None if x_init is None else np.array([float(x_init)]),
    )


def _psd(rng, d, diag=False, scale=1.0):
    if diag:
        return np.diag(rng.uniform(0.0, scale, d))
    M = rng.normal(size=(d, d))
    return scale * (M @ M.T) / d


def random_instance(rng, n=1, dx=None, dy=None, dz=None, exactly_one=None, x_fixed=False, q1=None):
    """Small random instance with deliberately mixed sign patterns and shared controls."""
    dx = dx or int(rng.integers(1, 4))
    dy = dy or int(rng.integers(1, 4))
    dz = dz or int(rng.integers(1, 3))
    if exactly_one is None:
        exactly_one = bool(dz > 1 and rng.random() < 0.5)
    Q = [np.diag(rng.uniform(0.0, 2.0, dx)) for _ in range(n + 1)]
    if q1 is not None:
        Q[0] = q1 * np.eye(dx)
    R, S, A, B, C, f, G, H = [], [], [], [], [], [], [], []
    for _ in range(n):
        R.append(_psd(rng, dy, diag=rng.random() < 0.5, scale=0.5))
        S.append(_psd(rng, dz, diag=True, scale=1.0))
        A.append(rng.uniform(-1.5, 1.5, (dx, dx)) * (rng.random((dx, dx)) < 0.8))
        B.append(rng.uniform(-1.0, 1.0, (dx, dy)))
        C.append(rng.uniform(-1.0, 1.0, (dx, dz)))
        f.append(rng.uniform(-0.5, 0.5, dx) * (rng.random() < 0.6))
        active = rng.random((dy, dz)) < 0.7
        g = -rng.uniform(0.0, 1.0, (dy, dz)) * (rng.random((dy, dz)) < 0.7)
        h = rng.uniform(0.0, 1.0, (dy, dz))
        G.append(np.where(active, g, 0.0))
        H.append(np.where(active, h, 0.0))
    lb, ub = [], []
    for _ in range(n + 1):
        lo = rng.uniform(-1.0, 0.0, dx)
        lb.append(lo)
        ub.append(lo + rng.uniform(0.5, 2.0, dx))
    x_init = None
    if x_fixed:
        x_init = lb[0] + rng.random(dx) * (ub[0] - lb[0])
    return HcpInstance(n=n, dx=dx, dy=dy, dz=dz, Q=Q, R=R, S=S, A=A, B=B, C=C, f=f, G=G, H=H,
                       lb=lb, ub=ub, x_init=x_init, mode_exactly_one=exactly_one)


def mode_patterns(inst):
    """All integral indicator vectors allowed in one period."""
    pats = [np.eye(inst.dz)[k] for k in range(inst.dz)]
    if not inst.mode_exactly_one:
        pats = [np.zeros(inst.dz)] + pats
    return pats


def enumerate_optimum(inst, solver=solve_relaxation):
    """Exhaustive search over indicator patterns; returns (best objective, best point, all points)."""
    model = build_epigraph(inst)
    best, best_pt, points = np.inf, None, []
    for combo in itertools.product(mode_patterns(inst), repeat=inst.n):
        m = model
        lb, ub = m.lb.copy(), m.ub.copy()
        for t, zt in enumerate(combo, start=1):
            for k in range(inst.dz):
                j = m.col(VarId(INDICATOR, t, k))
                lb[j] = ub[j] = zt[k]
        pt = solver(m, lb, ub)
        if pt.status == "optimal":
            points.append(pt)
            if pt.objective < best:
                best, best_pt = pt.objective, pt
    return best, best_pt, points


def sample_integral_points(inst, rng, count, max_tries=50):
    """Random single-period points with integral indicators, as local vectors plus tight w."""
    assert inst.n == 1
    pats = mode_patterns(inst)
    lb1, ub1 = inst.state_bounds(1)
    lb2, ub2 = inst.state_bounds(2)
    out_v, out_w, have = [], [], 0
    A, B, C, f = inst.A[0], inst.B[0], inst.C[0], inst.f[0]
    G, H = inst.G[0], inst.H[0]
    Q2, R, S = inst.Q[1], inst.R[0], inst.S[0]
    batch = count * 4
    for _ in range(max_tries):
        zi = rng.integers(0, len(pats), batch)
        Z = np.array(pats)[zi]
        X1 = lb1 + rng.random((batch, inst.dx)) * (ub1 - lb1)
        lo, hi = Z @ G.T, Z @ H.T
        # bias some samples to the interval ends, where cuts are tight
        U = rng.random((batch, inst.dy))
        U = np.where(rng.random((batch, inst.dy)) < 0.2, np.round(U), U)
        Y = lo + U * (hi - lo)
        X2 = X1 @ A.T + Y @ B.T + Z @ C.T + f
        ok = np.all((X2 >= lb2) & (X2 <= ub2), axis=1)
        X1, X2, Y, Z = X1[ok], X2[ok], Y[ok], Z[ok]
        W = (np.einsum("ij,jk,ik->i", X2, Q2, X2) + np.einsum("ij,jk,ik->i", Y, R, Y)
             + np.einsum("ij,jk,ik->i", Z, S, Z))
        out_v.append(np.hstack([X1, X2, Y, Z]))
        out_w.append(W)
        have += len(W)
        if have >= count:
            break
    V = np.vstack(out_v)[:count] if out_v else np.zeros((0, 2 * inst.dx + inst.dy + inst.dz))
    return V, np.concatenate(out_w)[:count] if out_w else np.zeros(0)

"""Solver-independent reference computations for the relaxation tests."""
from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.optimize import nnls

from hybridcuts.model import CONTROL, ORIGINAL, ConvexModel, VarId


def qp_model(P, c, A, lo, hi, lb, ub, const=0.0) -> ConvexModel:
    """Plain QP  min 0.5 x'Px + c'x  s.t. lo <= Ax <= hi, lb <= x <= ub."""
    n = len(c)
    A = np.atleast_2d(np.asarray(A, float)).reshape(-1, n)
    return ConvexModel(
        var_ids=tuple(VarId(CONTROL, 1, j) for j in range(n)),
        lb=np.asarray(lb, float), ub=np.asarray(ub, float), integer=np.zeros(n, bool),
        obj_P=sparse.csr_matrix(np.asarray(P, float)), obj_c=np.asarray(c, float), obj_const=float(const),
        rows=sparse.csr_matrix(A), row_lo=np.asarray(lo, float), row_hi=np.asarray(hi, float),
        row_tag=(ORIGINAL,) * A.shape[0], row_t=(1,) * A.shape[0], epigraphs=(),
    )


def random_qp(rng, n=20, m=10, strong=0.1):
    """Random strongly convex QP with a guaranteed interior point."""
    M = rng.normal(size=(n, n))
    P = M @ M.T / n + strong * np.eye(n)
    c = rng.normal(size=n) * 3
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(-0.5, 0.5, n)
    ax = A @ x0
    lo = ax - rng.uniform(0.05, 1.0, m)
    hi = ax + rng.uniform(0.05, 1.0, m)
    # a few one-sided rows and equalities
    lo[rng.random(m) < 0.2] = -np.inf
    eq = rng.random(m) < 0.1
    lo[eq] = hi[eq] = ax[eq]
    lb = x0 - rng.uniform(0.1, 2.0, n)
    ub = x0 + rng.uniform(0.1, 2.0, n)
    return P, c, A, lo, hi, lb, ub


def _as_geq(A, lo, hi, lb, ub):
    """Stack every finite side as G x >= h."""
    n = A.shape[1]
    I = np.eye(n)
    rows, rhs = [], []
    for M, l, u in ((A, lo, hi), (I, lb, ub)):
        for i in range(M.shape[0]):
            if np.isfinite(l[i]):
                rows.append(M[i])
                rhs.append(l[i])
            if np.isfinite(u[i]):
                rows.append(-M[i])
                rhs.append(-u[i])
    return np.array(rows), np.array(rhs)


def projected_gradient_qp(P, c, A, lo, hi, lb, ub, tol=1e-11, max_iter=200_000):
    """Accelerated projected gradient on the dual of a strongly convex QP.

    The dual  max_{mu >= 0}  h'mu - 0.5 (G'mu - c)' P^-1 (G'mu - c)  only has
    a sign constraint, so its projection is a clip.  Returns (x, objective).
    """
    G, h = _as_geq(np.asarray(A, float), np.asarray(lo, float), np.asarray(hi, float),
                   np.asarray(lb, float), np.asarray(ub, float))
    Pinv = np.linalg.inv(P)
    K = G @ Pinv @ G.T
    L = np.linalg.eigvalsh(K)[-1]
    g0 = G @ Pinv @ c
    mu = np.zeros(len(h))
    y, t = mu.copy(), 1.0
    for k in range(max_iter):
        grad = h - K @ y + g0
        mu_next = np.maximum(y + grad / L, 0.0)
        if (mu_next - mu) @ (y - mu_next) > 0:  # adaptive restart
            t = 1.0
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        y = mu_next + (t - 1) / t_next * (mu_next - mu)
        mu, t = mu_next, t_next
        if k % 50 == 0:
            x = Pinv @ (G.T @ mu - c)
            r = G @ x - h
            if np.max(-r, initial=0.0) < tol and abs(mu @ r) < tol:
                break
    x = Pinv @ (G.T @ mu - c)
    return x, float(0.5 * x @ P @ x + c @ x)


def kkt_residual(P, c, A, lo, hi, lb, ub, x, act_tol=1e-7):
    """Stationarity residual with multipliers recovered by NNLS on the active set."""
    G, h = _as_geq(np.asarray(A, float), np.asarray(lo, float), np.asarray(hi, float),
                   np.asarray(lb, float), np.asarray(ub, float))
    grad = P @ x + c
    r = G @ x - h
    act = r <= act_tol * (1 + np.abs(h))
    if not act.any():
        return float(np.max(np.abs(grad))), max(0.0, float(np.max(-r)))
    Ga = G[act]
    mu, res = nnls(Ga.T, grad, maxiter=50 * Ga.shape[0])
    return float(np.max(np.abs(grad - Ga.T @ mu))), max(0.0, float(np.max(-r)))

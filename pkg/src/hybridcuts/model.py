"""Hybrid control problem data and its epigraph-form convex model.

Periods are numbered from 1 as in the usual control notation: states
``x_1 .. x_{n+1}``, controls, indicators and epigraph variables ``1 .. n``.
Per-period arrays in :class:`HcpInstance` are stored in Python lists, so the
data of period ``t`` lives at position ``t - 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy import sparse

PSD_TOL = 1e-10

STATE, CONTROL, INDICATOR, EPIGRAPH = "state", "control", "indicator", "epigraph"
KINDS = (STATE, CONTROL, INDICATOR, EPIGRAPH)

# provenance tags for model rows
ORIGINAL, FEASIBILITY, GRADIENT, MODE_FIX = "original", "feasibility", "gradient", "mode-fix"


class VarId(NamedTuple):
    kind: str
    t: int
    index: int

    def __str__(self):
        short = {STATE: "x", CONTROL: "y", INDICATOR: "z", EPIGRAPH: "w"}[self.kind]
        return f"{short}[{self.t},{self.index}]"


def parse_varid(text: str) -> VarId:
    short = {"x": STATE, "y": CONTROL, "z": INDICATOR, "w": EPIGRAPH}
    head, rest = text.split("[", 1)
    t, i = rest.rstrip("]").split(",")
    return VarId(short[head], int(t), int(i))


class InstanceError(ValueError):
    pass


class InfeasibleFixError(ValueError):
    pass


@dataclass(frozen=True)
class HcpInstance:
    """All data of an n-period hybrid control problem.

    Matrices are numpy arrays; per-period data are tuples indexed by
    ``t - 1``.  ``const`` is an objective offset that only shifts reported
    objective values (used for tracking references).
    """

    n: int
    dx: int
    dy: int
    dz: int
    Q: tuple
    R: tuple
    S: tuple
    A: tuple
    B: tuple
    C: tuple
    f: tuple
    G: tuple
    H: tuple
    lb: tuple
    ub: tuple
    lin_x: tuple | None = None
    lin_y: tuple | None = None
    x_init: np.ndarray | None = None
    mode_exactly_one: bool = False
    const: float = 0.0

    def __post_init__(self):
        # freeze array data so instances can be shared safely
        for name in ("Q", "R", "S", "A", "B", "C", "f", "G", "H", "lb", "ub", "lin_x", "lin_y"):
            seq = getattr(self, name)
            if seq is None:
                continue
            arrs = tuple(np.array(a, dtype=float) for a in seq)
            for a in arrs:
                a.setflags(write=False)
            object.__setattr__(self, name, arrs)
        if self.x_init is not None:
            x0 = np.array(self.x_init, dtype=float).reshape(-1)
            x0.setflags(write=False)
            object.__setattr__(self, "x_init", x0)

    # effective state bounds, with x_init folded into period 1
    def state_bounds(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.lb[t - 1], self.ub[t - 1]
        if t == 1 and self.x_init is not None:
            return self.x_init.copy(), self.x_init.copy()
        return lo.copy(), hi.copy()

    def linx(self, t: int) -> np.ndarray:
        return np.zeros(self.dx) if self.lin_x is None else self.lin_x[t - 1]

    def liny(self, t: int) -> np.ndarray:
        return np.zeros(self.dy) if self.lin_y is None else self.lin_y[t - 1]


@dataclass(frozen=True)
class Issue:
    invariant: str
    period: int | None
    location: str
    detail: str

    def __str__(self):
        where = f"period {self.period}" if self.period is not None else "instance"
        return f"{self.invariant}: {where} {self.location} ({self.detail})"


def _psd_issue(M, name, t):
    if not np.allclose(M, M.T, atol=PSD_TOL, rtol=0):
        return Issue("symmetry", t, name, "matrix not symmetric")
    ev = np.linalg.eigvalsh(0.5 * (M + M.T)) if M.size else np.zeros(0)
    if ev.size and ev.min() < -PSD_TOL:
        return Issue("psd", t, name, f"min eigenvalue {ev.min():.3g}")
    return None


def validate(inst: HcpInstance, cuts_enabled: bool = True) -> list[Issue]:
    """Check every instance invariant; an empty list means the instance is usable."""
    issues: list[Issue] = []
    n, dx, dy, dz = inst.n, inst.dx, inst.dy, inst.dz
    for name, v in (("n", n), ("dx", dx), ("dy", dy), ("dz", dz)):
        if int(v) != v or v < 1:
            issues.append(Issue("dimension", None, name, f"must be a positive integer, got {v}"))
    if issues:
        return issues

    expect = {
        "Q": (n + 1, (dx, dx)), "R": (n, (dy, dy)), "S": (n, (dz, dz)),
        "A": (n, (dx, dx)), "B": (n, (dx, dy)), "C": (n, (dx, dz)), "f": (n, (dx,)),
        "G": (n, (dy, dz)), "H": (n, (dy, dz)), "lb": (n + 1, (dx,)), "ub": (n + 1, (dx,)),
        "lin_x": (n + 1, (dx,)), "lin_y": (n, (dy,)),
    }
    for name, (count, shape) in expect.items():
        seq = getattr(inst, name)
        if seq is None:
            continue
        if len(seq) != count:
            issues.append(Issue("dimension", None, name, f"expected {count} periods, got {len(seq)}"))
            continue
        for t, a in enumerate(seq, start=1):
            if a.shape != shape:
                issues.append(Issue("dimension", t, name, f"expected shape {shape}, got {a.shape}"))
            elif not np.all(np.isfinite(a)) and name not in ("lb", "ub"):
                issues.append(Issue("finite", t, name, "non-finite entry"))
    if inst.x_init is not None and inst.x_init.shape != (dx,):
        issues.append(Issue("dimension", 1, "x_init", f"expected shape {(dx,)}, got {inst.x_init.shape}"))
    if issues:
        return issues

    for t in range(1, n + 2):
        lo, hi = inst.lb[t - 1], inst.ub[t - 1]
        for i in np.flatnonzero(lo > hi):
            issues.append(Issue("bound order", t, f"coordinate {i}", f"lb {lo[i]} > ub {hi[i]}"))
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            issues.append(Issue("finite", t, "lb/ub", "NaN bound"))
    if inst.x_init is not None:
        bad = (inst.x_init < inst.lb[0]) | (inst.x_init > inst.ub[0])
        for i in np.flatnonzero(bad):
            issues.append(Issue("bound order", 1, f"coordinate {i}", "x_init outside [lb, ub]"))

    for name, seq, first in (("Q", inst.Q, 1), ("R", inst.R, 1), ("S", inst.S, 1)):
        for t, M in enumerate(seq, start=first):
            issue = _psd_issue(M, name, t)
            if issue:
                issues.append(issue)
    if cuts_enabled:
        for t in range(2, n + 2):
            M = inst.Q[t - 1]
            if np.any(np.abs(M - np.diag(np.diag(M))) > PSD_TOL):
                issues.append(Issue("diagonal", t, "Q", "state cost must be diagonal for cut generation"))
    for t in range(1, n + 1):
        G, H = inst.G[t - 1], inst.H[t - 1]
        for j, k in zip(*np.nonzero(G > H)):
            issues.append(Issue("mode bound order", t, f"control {j} mode {k}", f"G {G[j, k]} > H {H[j, k]}"))
    return issues


# ---------------------------------------------------------------------------
# convex model


@dataclass(frozen=True)
class EpigraphRow:
    """``v' P v <= w`` with ``v`` the variables ``cols`` and ``w`` column ``w``."""

    t: int
    cols: np.ndarray
    P: np.ndarray
    w: int


@dataclass(frozen=True)
class ConvexModel:
    var_ids: tuple
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray
    obj_P: sparse.csr_matrix  # objective is 0.5 v'Pv + c'v + const
    obj_c: np.ndarray
    obj_const: float
    rows: sparse.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    row_tag: tuple
    row_t: tuple
    epigraphs: tuple
    meta: dict = field(default_factory=dict, compare=False)

    @cached_property
    def index(self) -> dict:
        return {v: i for i, v in enumerate(self.var_ids)}

    @property
    def nvar(self) -> int:
        return len(self.var_ids)

    def col(self, v: VarId) -> int:
        return self.index[v]

    def count_rows(self, tag: str) -> int:
        return sum(1 for r in self.row_tag if r == tag)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.obj_P @ x) + self.obj_c @ x + self.obj_const)

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "ConvexModel":
        return replace(self, lb=np.asarray(lb, float).copy(), ub=np.asarray(ub, float).copy())

    def with_rows(self, coeffs: sparse.spmatrix, lo, hi, tags, periods) -> "ConvexModel":
        if coeffs.shape[0] == 0:
            return self
        return replace(
            self,
            rows=sparse.vstack([self.rows, sparse.csr_matrix(coeffs)], format="csr"),
            row_lo=np.concatenate([self.row_lo, np.asarray(lo, float)]),
            row_hi=np.concatenate([self.row_hi, np.asarray(hi, float)]),
            row_tag=self.row_tag + tuple(tags),
            row_t=self.row_t + tuple(periods),
            meta={k: v for k, v in self.meta.items() if not k.startswith("_")},
        )

    def add_cuts(self, cuts: Sequence) -> "ConvexModel":
        """Append ``LinearCut`` rows (coefficients . v >= rhs)."""
        if not cuts:
            return self
        data, ri, ci = [], [], []
        for k, cut in enumerate(cuts):
            for v, a in cut.coeffs.items():
                ri.append(k)
                ci.append(self.index[v])
                data.append(a)
        M = sparse.csr_matrix((data, (ri, ci)), shape=(len(cuts), self.nvar))
        return self.with_rows(
            M,
            [c.rhs for c in cuts],
            np.full(len(cuts), np.inf),
            [c.provenance for c in cuts],
            [c.t for c in cuts],
        )

    def max_violation(self, x: np.ndarray) -> float:
        """Largest unscaled violation of bounds, rows and epigraph constraints at x."""
        viol = [0.0]
        viol.append(np.max(np.maximum(self.lb - x, 0.0), initial=0.0))
        viol.append(np.max(np.maximum(x - self.ub, 0.0), initial=0.0))
        if self.rows.shape[0]:
            ax = self.rows @ x
            viol.append(np.max(np.maximum(self.row_lo - ax, 0.0), initial=0.0))
            viol.append(np.max(np.maximum(ax - self.row_hi, 0.0), initial=0.0))
        for e in self.epigraphs:
            v = x[e.cols]
            viol.append(max(0.0, float(v @ e.P @ v - x[e.w])))
        return float(max(viol))


def fix_variable(model: ConvexModel, v: VarId, value: float, tol: float = 1e-9) -> ConvexModel:
    j = model.col(v)
    if value < model.lb[j] - tol or value > model.ub[j] + tol:
        raise InfeasibleFixError(f"cannot fix {v} to {value}: bounds [{model.lb[j]}, {model.ub[j]}]")
    lb, ub = model.lb.copy(), model.ub.copy()
    lb[j] = ub[j] = value
    return model.with_bounds(lb, ub)


def variable_ids(inst: HcpInstance) -> list[VarId]:
    ids = [VarId(STATE, t, i) for t in range(1, inst.n + 2) for i in range(inst.dx)]
    ids += [VarId(CONTROL, t, j) for t in range(1, inst.n + 1) for j in range(inst.dy)]
    ids += [VarId(INDICATOR, t, k) for t in range(1, inst.n + 1) for k in range(inst.dz)]
    ids += [VarId(EPIGRAPH, t, 0) for t in range(1, inst.n + 1)]
    return ids


def build_epigraph(inst: HcpInstance) -> ConvexModel:
    """Epigraph model: objective x_1'Q_1x_1 + sum_t w_t + linear terms."""
    n, dx, dy, dz = inst.n, inst.dx, inst.dy, inst.dz
    ids = variable_ids(inst)
    index = {v: i for i, v in enumerate(ids)}
    nv = len(ids)

    def xs(t):
        return np.array([index[VarId(STATE, t, i)] for i in range(dx)])

    def ys(t):
        return np.array([index[VarId(CONTROL, t, j)] for j in range(dy)])

    def zs(t):
        return np.array([index[VarId(INDICATOR, t, k)] for k in range(dz)])

    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    integer = np.zeros(nv, dtype=bool)
    for t in range(1, n + 2):
        lo, hi = inst.state_bounds(t)
        lb[xs(t)], ub[xs(t)] = lo, hi
    for t in range(1, n + 1):
        lb[zs(t)], ub[zs(t)] = 0.0, 1.0
        integer[zs(t)] = True

    # objective
    c = np.zeros(nv)
    Pi, Pj, Pv = [], [], []
    Q1 = inst.Q[0]
    x1 = xs(1)
    for a in range(dx):
        for b in range(dx):
            if Q1[a, b] != 0.0:
                Pi.append(x1[a]); Pj.append(x1[b]); Pv.append(2.0 * Q1[a, b])
    for t in range(1, n + 2):
        c[xs(t)] += inst.linx(t)
    for t in range(1, n + 1):
        c[ys(t)] += inst.liny(t)
        c[index[VarId(EPIGRAPH, t, 0)]] = 1.0
    P = sparse.csr_matrix((Pv, (Pi, Pj)), shape=(nv, nv))

    # linear rows, ordered by (t, row)
    ri, ci, data, lo, hi, tags, periods = [], [], [], [], [], [], []
    r = 0

    def add(cols, coefs, rlo, rhi, t):
        nonlocal r
        for cc, aa in zip(cols, coefs):
            if aa != 0.0:
                ri.append(r); ci.append(cc); data.append(aa)
        lo.append(rlo); hi.append(rhi); tags.append(ORIGINAL); periods.append(t)
        r += 1

    for t in range(1, n + 1):
        A, B, C, f = inst.A[t - 1], inst.B[t - 1], inst.C[t - 1], inst.f[t - 1]
        G, H = inst.G[t - 1], inst.H[t - 1]
        x_now, x_next, y, z = xs(t), xs(t + 1), ys(t), zs(t)
        for i in range(dx):
            cols = np.concatenate([[x_next[i]], x_now, y, z])
            coefs = np.concatenate([[1.0], -A[i], -B[i], -C[i]])
            # duplicate columns (A[i,i] with x_next) never happen: x_now != x_next
            add(cols, coefs, f[i], f[i], t)
        if inst.mode_exactly_one:
            add(z, np.ones(dz), 1.0, 1.0, t)
        else:
            add(z, np.ones(dz), -np.inf, 1.0, t)
        for j in range(dy):
            add(np.concatenate([[y[j]], z]), np.concatenate([[1.0], -G[j]]), 0.0, np.inf, t)
        for j in range(dy):
            add(np.concatenate([[y[j]], z]), np.concatenate([[1.0], -H[j]]), -np.inf, 0.0, t)
    rows = sparse.csr_matrix((data, (ri, ci)), shape=(r, nv))

    epis = []
    for t in range(1, n + 1):
        cols = np.concatenate([xs(t + 1), ys(t), zs(t)])
        Pblk = np.zeros((len(cols), len(cols)))
        Pblk[:dx, :dx] = inst.Q[t]
        Pblk[dx:dx + dy, dx:dx + dy] = inst.R[t - 1]
        Pblk[dx + dy:, dx + dy:] = inst.S[t - 1]
        Pblk.setflags(write=False)
        epis.append(EpigraphRow(t, cols, Pblk, index[VarId(EPIGRAPH, t, 0)]))

    return ConvexModel(
        var_ids=tuple(ids), lb=lb, ub=ub, integer=integer,
        obj_P=P, obj_c=c, obj_const=float(inst.const),
        rows=rows, row_lo=np.array(lo, float), row_hi=np.array(hi, float),
        row_tag=tuple(tags), row_t=tuple(periods), epigraphs=tuple(epis),
        meta={"n": n, "dx": dx, "dy": dy, "dz": dz},
    )


def direct_objective(inst: HcpInstance, x, y, z) -> float:
    """Objective of the HCP evaluated at trajectories x (n+1, dx), y (n, dy), z (n, dz)."""
    val = float(x[0] @ inst.Q[0] @ x[0]) + inst.const
    for t in range(1, inst.n + 1):
        val += float(x[t] @ inst.Q[t] @ x[t] + y[t - 1] @ inst.R[t - 1] @ y[t - 1]
                     + z[t - 1] @ inst.S[t - 1] @ z[t - 1])
        val += float(inst.liny(t) @ y[t - 1])
    for t in range(1, inst.n + 2):
        val += float(inst.linx(t) @ x[t - 1])
    return val


def check_feasible(inst: HcpInstance, x, y, z, tol: float = 1e-7) -> float:
    """Largest violation of the HCP constraints at (x, y, z), with z required integral."""
    worst = 0.0
    for t in range(1, inst.n + 2):
        lo, hi = inst.state_bounds(t)
        worst = max(worst, np.max(lo - x[t - 1], initial=0.0), np.max(x[t - 1] - hi, initial=0.0))
    for t in range(1, inst.n + 1):
        zt = z[t - 1]
        worst = max(worst, float(np.max(np.minimum(np.abs(zt), np.abs(zt - 1.0)), initial=0.0)))
        s = zt.sum()
        worst = max(worst, abs(s - 1.0) if inst.mode_exactly_one else max(0.0, s - 1.0))
        nxt = inst.A[t - 1] @ x[t - 1] + inst.B[t - 1] @ y[t - 1] + inst.C[t - 1] @ zt + inst.f[t - 1]
        worst = max(worst, float(np.max(np.abs(nxt - x[t]))))
        worst = max(worst, float(np.max(inst.G[t - 1] @ zt - y[t - 1], initial=0.0)),
                    float(np.max(y[t - 1] - inst.H[t - 1] @ zt, initial=0.0)))
    return float(worst)


# ---------------------------------------------------------------------------
# instance files

_FIELDS = ("n", "dx", "dy", "dz", "mode_exactly_one", "Q", "R", "S", "A", "B", "C", "f",
           "G", "H", "lb", "ub", "lin_x", "lin_y", "x_init", "const")
_REQUIRED = ("n", "dx", "dy", "dz", "Q", "R", "S", "A", "B", "C", "f", "G", "H", "lb", "ub")


def _num(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        if v is None:
            return np.nan
        raise InstanceError(f"field {where}: expected a number, got {v!r}")
    return float(v)


def _to_array(obj, where):
    if isinstance(obj, list):
        return [_to_array(o, f"{where}[{i}]") for i, o in enumerate(obj)]
    return _num(obj, where)


def _jsonable(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        v = float(a)
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return [_jsonable(x) for x in a]


def _decode_inf(obj):
    if isinstance(obj, list):
        return [_decode_inf(o) for o in obj]
    if obj in ("inf", "Infinity", "+inf"):
        return np.inf
    if obj in ("-inf", "-Infinity"):
        return -np.inf
    return obj


def instance_to_dict(inst: HcpInstance) -> dict:
    d = {"n": inst.n, "dx": inst.dx, "dy": inst.dy, "dz": inst.dz,
         "mode_exactly_one": bool(inst.mode_exactly_one)}
    for name in ("Q", "R", "S", "A", "B", "C", "f", "G", "H", "lb", "ub"):
        d[name] = [_jsonable(a) for a in getattr(inst, name)]
    d["lin_x"] = None if inst.lin_x is None else [_jsonable(a) for a in inst.lin_x]
    d["lin_y"] = None if inst.lin_y is None else [_jsonable(a) for a in inst.lin_y]
    d["x_init"] = None if inst.x_init is None else _jsonable(inst.x_init)
    if inst.const:
        d["const"] = float(inst.const)
    return d


def instance_from_dict(d: dict) -> HcpInstance:
    if not isinstance(d, dict):
        raise InstanceError("instance file must hold a JSON object")
    unknown = sorted(set(d) - set(_FIELDS))
    if unknown:
        raise InstanceError(f"unknown field(s): {', '.join(unknown)}")
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise InstanceError(f"missing field(s): {', '.join(missing)}")
    kw = {}
    for k in ("n", "dx", "dy", "dz"):
        if isinstance(d[k], bool) or not isinstance(d[k], int):
            raise InstanceError(f"field {k}: expected an integer")
        kw[k] = d[k]
    kw["mode_exactly_one"] = bool(d.get("mode_exactly_one", False))
    for k in ("Q", "R", "S", "A", "B", "C", "f", "G", "H", "lb", "ub", "lin_x", "lin_y"):
        v = d.get(k)
        if v is None:
            kw[k] = None
            continue
        if not isinstance(v, list):
            raise InstanceError(f"field {k}: expected a list indexed by period")
        kw[k] = [np.array(_to_array(_decode_inf(p), f"{k}[{t}]"), dtype=float) for t, p in enumerate(v)]
    if d.get("x_init") is not None:
        kw["x_init"] = np.array(_to_array(d["x_init"], "x_init"), dtype=float)
    kw["const"] = _num(d.get("const", 0.0), "const")
    try:
        return HcpInstance(**kw)
    except (TypeError, ValueError) as exc:
        raise InstanceError(str(exc)) from exc


def dumps_instance(inst: HcpInstance) -> str:
    return json.dumps(instance_to_dict(inst), indent=1) + "\n"


def loads_instance(text: str) -> HcpInstance:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceError(f"line {exc.lineno}: {exc.msg}") from exc
    return instance_from_dict(d)


def save_instance(inst: HcpInstance, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_instance(inst))


def load_instance(path) -> HcpInstance:
    with open(path, encoding="utf-8") as fh:
        return loads_instance(fh.read())

"""Branch and bound over the indicator variables, with an optional root cut loop."""
from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .cuts import CutConfig, SeparationState, mode_fixes, separate, static_cuts
from .model import (CONTROL, EPIGRAPH, FEASIBILITY, GRADIENT, INDICATOR, MODE_FIX, STATE,
                    HcpInstance, InstanceError, VarId, build_epigraph, check_feasible,
                    direct_objective, validate)
from .qpsolve import INFEASIBLE, OPTIMAL, RelaxPoint, solve_relaxation

MIQP, WCG = "miqp", "wc-g"
VARIANTS = (MIQP, WCG)


@dataclass(frozen=True)
class SolveConfig:
    variant: str = WCG
    root_cut_rounds: int = 50
    node_cut_rounds: int = 0
    int_tol: float = 1e-6
    gap_tol: float = 1e-6
    time_limit: float = 3600.0
    node_limit: int | None = None
    node_selection: str = "best-bound"
    branching: str = "most-fractional"
    split_policy: str = "singletons"
    custom_splits: tuple | None = None
    dive_every: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.int_tol <= 0 or self.gap_tol <= 0 or self.time_limit <= 0:
            raise ValueError("tolerances and time limit must be positive")
        if self.node_selection not in ("best-bound", "depth-first"):
            raise ValueError(f"unknown node selection {self.node_selection!r}")
        if self.branching not in ("most-fractional", "first-fractional"):
            raise ValueError(f"unknown branching rule {self.branching!r}")

    @property
    def cut_config(self) -> CutConfig:
        return CutConfig(split_policy=self.split_policy, custom_splits=self.custom_splits)


@dataclass
class BnbReport:
    variant: str
    status: str
    incumbent: float
    best_bound: float
    root_bound: float
    nodes: int
    time_s: float
    cuts_added: dict = field(default_factory=dict)
    root_rounds: int = 0
    fixed_periods: tuple = ()
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    inexact_solves: int = 0

    @property
    def root_gap_pct(self) -> float:
        return root_gap(self)

    @property
    def total_cuts(self) -> int:
        return int(sum(self.cuts_added.values()))

    def record(self) -> str:
        """Flat ``key=value`` text, one field per line."""
        items = [
            ("variant", self.variant), ("status", self.status),
            ("incumbent", _fmt(self.incumbent)), ("best_bound", _fmt(self.best_bound)),
            ("root_bound", _fmt(self.root_bound)), ("root_gap_pct", _fmt(self.root_gap_pct)),
            ("nodes", self.nodes), ("root_rounds", self.root_rounds),
            ("cuts_feasibility", self.cuts_added.get(FEASIBILITY, 0)),
            ("cuts_gradient", self.cuts_added.get(GRADIENT, 0)),
            ("cuts_mode_fix", self.cuts_added.get(MODE_FIX, 0)),
            ("fixed_periods", " ".join(str(t) for t in self.fixed_periods)),
            ("time_s", _fmt(self.time_s)),
        ]
        if self.z is not None:
            items.append(("z", ";".join(" ".join(_fmt(v) for v in row) for row in self.z)))
            items.append(("x", ";".join(" ".join(_fmt(v) for v in row) for row in self.x)))
            items.append(("y", ";".join(" ".join(_fmt(v) for v in row) for row in self.y)))
        return "".join(f"{k}={v}\n" for k, v in items)


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if not np.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return f"{v:.6g}"


def root_gap(report) -> float:
    """Relative distance, in percent, between incumbent and root bound."""
    inc = report.incumbent
    if not np.isfinite(inc):
        return float("nan")
    return 100.0 * (inc - report.root_bound) / max(abs(inc), 1e-12)


class _Search:
    def __init__(self, inst: HcpInstance, config: SolveConfig, t0: float):
        self.inst = inst
        self.config = config
        self.t0 = t0
        self.model = build_epigraph(inst)
        self.base = self.model  # cut-free copy for exact fixed-mode completions
        self.zcols = np.array([[self.model.col(VarId(INDICATOR, t, k)) for k in range(inst.dz)]
                               for t in range(1, inst.n + 1)])
        self.incumbent = np.inf
        self.best = None  # (x, y, z)
        self.inexact = 0
        self.sep_state = SeparationState()

    # -- helpers -------------------------------------------------------------
    def timed_out(self) -> bool:
        return time.perf_counter() - self.t0 > self.config.time_limit

    def solve(self, lb, ub, parent_bound: float = -np.inf) -> RelaxPoint:
        pt = solve_relaxation(self.model, lb, ub)
        if pt.status not in (OPTIMAL, INFEASIBLE):
            self.inexact += 1
            scale = 1e-6 * (1.0 + pt.data_norm)
            if np.isfinite(pt.objective) and pt.primal_res <= scale and pt.gap <= 1e-3:
                # reduced accuracy: shift by the duality gap to keep a safe bound
                pt.extra["inexact"] = True
                pt.objective -= pt.extra.get("gap_abs", 0.0)
            else:
                # no usable bound; never prune on it, inherit the parent's bound instead
                pt.extra["unreliable"] = True
                pt.objective = parent_bound
            pt.status = OPTIMAL
        return pt

    def trajectories(self, pt: RelaxPoint):
        inst, m = self.inst, self.model
        x = np.array([[pt.x[m.col(VarId(STATE, t, i))] for i in range(inst.dx)] for t in range(1, inst.n + 2)])
        y = np.array([[pt.x[m.col(VarId(CONTROL, t, j))] for j in range(inst.dy)] for t in range(1, inst.n + 1)])
        z = pt.x[self.zcols]
        return x, y, z

    def fractional(self, pt: RelaxPoint):
        zv = pt.x[self.zcols].ravel()
        frac = np.minimum(zv - np.floor(zv), np.ceil(zv) - zv)
        return frac

    def offer(self, pt: RelaxPoint, lb=None, ub=None) -> bool:
        """Try an integral relaxation point as incumbent."""
        x, y, z = self.trajectories(pt)
        z = np.round(z)
        cand = self._complete(z)
        if cand is None:
            cand = self._accept(x, y, z)
        if cand is None and lb is not None:
            cand = self._polish(z, lb, ub)
        if cand is None:
            return False
        x, y, z = cand
        val = direct_objective(self.inst, x, y, z)
        if val < self.incumbent:
            self.incumbent = val
            self.best = (x, y, z)
            return True
        return False

    def _complete(self, z):
        """Best continuous completion of ``z``, solved on the cut-free model."""
        lb, ub = self.base.lb.copy(), self.base.ub.copy()
        cols = self.zcols.ravel()
        if np.any(z.ravel() < lb[cols]) or np.any(z.ravel() > ub[cols]):
            return None
        lb[cols] = ub[cols] = z.ravel()
        pt = solve_relaxation(self.base, lb, ub)
        if pt.status != OPTIMAL:
            return None
        x, y, _ = self.trajectories(pt)
        if check_feasible(self.inst, x, y, z) <= 1e-7:
            return x, y, z
        return None

    def _accept(self, x, y, z):
        if check_feasible(self.inst, x, y, z) <= 1e-7:
            return x, y, z
        # reduced-accuracy solves: clip controls and re-simulate the states exactly
        inst = self.inst
        x, y = x.copy(), y.copy()
        lo1, hi1 = inst.state_bounds(1)
        x[0] = np.clip(x[0], lo1, hi1)
        for t in range(inst.n):
            y[t] = np.clip(y[t], inst.G[t] @ z[t], inst.H[t] @ z[t])
            x[t + 1] = inst.A[t] @ x[t] + inst.B[t] @ y[t] + inst.C[t] @ z[t] + inst.f[t]
        if check_feasible(inst, x, y, z) <= 1e-7:
            return x, y, z
        return None

    def _polish(self, z, lb, ub):
        """Re-solve with the modes fixed and the state box pulled in slightly."""
        lb, ub = lb.copy(), ub.copy()
        lb[self.zcols.ravel()] = ub[self.zcols.ravel()] = z.ravel()
        m = self.model
        for t in range(2, self.inst.n + 2):
            for i in range(self.inst.dx):
                j = m.col(VarId(STATE, t, i))
                lo, hi = lb[j], ub[j]
                pad = 1e-6 * max(1.0, abs(lo) if np.isfinite(lo) else 1.0, abs(hi) if np.isfinite(hi) else 1.0)
                if hi - lo > 4 * pad:
                    lb[j], ub[j] = lo + pad, hi - pad
        pt = solve_relaxation(m, lb, ub)
        if not np.isfinite(pt.objective) or pt.status == INFEASIBLE:
            return None
        x, y, _ = self.trajectories(pt)
        return self._accept(x, y, z)

    def dive(self, pt: RelaxPoint, lb, ub) -> None:
        """Round the indicators at 0.5 and solve the resulting fixed-mode problem."""
        inst = self.inst
        zbar = pt.x[self.zcols]
        lb, ub = lb.copy(), ub.copy()
        for t in range(inst.n):
            row = zbar[t]
            k = int(np.argmax(row))
            pick = np.zeros(inst.dz)
            if inst.mode_exactly_one or row[k] >= 0.5:
                pick[k] = 1.0
            cols = self.zcols[t]
            # respect branching fixes
            pick = np.clip(pick, lb[cols], ub[cols])
            lb[cols] = ub[cols] = pick
        cand = self.solve(lb, ub)
        if cand.status == OPTIMAL:
            self.offer(cand, lb, ub)

    def prune_level(self) -> float:
        inc = self.incumbent
        return inc - self.config.gap_tol * max(1.0, abs(inc)) if np.isfinite(inc) else np.inf

    def add_cuts(self, cuts) -> None:
        self.model = self.model.add_cuts(cuts)


def solve_miqp(inst: HcpInstance, config: SolveConfig | None = None) -> BnbReport:
    """Solve the hybrid control problem to the configured optimality gap."""
    config = config or SolveConfig()
    t0 = time.perf_counter()
    issues = validate(inst, cuts_enabled=config.variant == WCG)
    if issues:
        raise InstanceError("; ".join(str(i) for i in issues))
    S = _Search(inst, config, t0)
    cuts_added = {FEASIBILITY: 0, GRADIENT: 0, MODE_FIX: 0}
    lb, ub = S.model.lb.copy(), S.model.ub.copy()
    fixed = []
    if config.variant == WCG:
        fixed = mode_fixes(inst)
        for t in fixed:
            lb[S.zcols[t - 1][0]] = ub[S.zcols[t - 1][0]] = 1.0
        cuts_added[MODE_FIX] = len(fixed)
        static = static_cuts(inst, config.cut_config, skip_periods=fixed)
        S.add_cuts(static)
        cuts_added[FEASIBILITY] = len(static)

    root = S.solve(lb, ub)
    rounds = 0
    if config.variant == WCG and root.status == OPTIMAL:
        for rounds in range(1, config.root_cut_rounds + 1):
            new = separate(root, S.model.with_bounds(lb, ub), inst, config.cut_config, S.sep_state)
            if not new:
                rounds -= 1
                break
            S.add_cuts(new)
            cuts_added[GRADIENT] += len(new)
            nxt = S.solve(lb, ub, parent_bound=root.objective)
            if nxt.status != OPTIMAL or nxt.extra.get("unreliable"):
                break
            root = nxt
            if S.timed_out():
                break

    def report(status, best_bound, nodes):
        x, y, z = S.best if S.best is not None else (None, None, None)
        root_bound = root.objective if root.status == OPTIMAL else np.inf
        # solver noise can lift the bound a hair above the optimum; lowering a bound is always safe
        root_bound = min(root_bound, S.incumbent)
        return BnbReport(
            variant=config.variant, status=status, incumbent=S.incumbent, best_bound=best_bound,
            root_bound=root_bound, nodes=nodes,
            time_s=time.perf_counter() - t0, cuts_added=cuts_added, root_rounds=rounds,
            fixed_periods=tuple(fixed), x=x, y=y, z=z, inexact_solves=S.inexact,
        )

    if root.status == INFEASIBLE:
        return report("infeasible", np.inf, 0)

    if np.all(S.fractional(root) <= config.int_tol):
        S.offer(root, lb, ub)
    S.dive(root, lb, ub)

    counter = 0
    heap = []  # (key, seq, bound, lb, ub, point, depth)

    def push(pt, nlb, nub, depth):
        nonlocal counter
        key = pt.objective if config.node_selection == "best-bound" else -depth
        heapq.heappush(heap, (key, counter, pt.objective, nlb, nub, pt, depth))
        counter += 1

    push(root, lb, ub, 0)
    nodes = 0
    status = "optimal"
    processed = 0
    while heap:
        if S.timed_out() or (config.node_limit is not None and nodes >= config.node_limit):
            status = "time-limit"
            break
        key, _, bound, nlb, nub, pt, depth = heapq.heappop(heap)
        if bound >= S.prune_level():
            if config.node_selection == "best-bound":
                heap.clear()
                break
            continue
        processed += 1
        if config.node_cut_rounds and depth > 0 and config.variant == WCG:
            for _ in range(config.node_cut_rounds):
                new = separate(pt, S.model.with_bounds(nlb, nub), inst, config.cut_config, S.sep_state)
                if not new:
                    break
                S.add_cuts(new)
                cuts_added[GRADIENT] += len(new)
                pt2 = S.solve(nlb, nub, parent_bound=pt.objective)
                if pt2.status != OPTIMAL or pt2.extra.get("unreliable"):
                    break
                pt = pt2
            if pt.objective >= S.prune_level():
                continue
        frac = S.fractional(pt)
        if np.all(frac <= config.int_tol):
            S.offer(pt, nlb, nub)
            continue
        if config.branching == "most-fractional":
            j = int(np.argmax(frac))  # ties resolved by lowest index
        else:
            j = int(np.flatnonzero(frac > config.int_tol)[0])
        col = S.zcols.ravel()[j]
        zval = pt.x[col]
        for val in ((1.0, 0.0) if zval >= 0.5 else (0.0, 1.0)):
            clb, cub = nlb.copy(), nub.copy()
            clb[col] = cub[col] = val
            child = S.solve(clb, cub, parent_bound=bound)
            nodes += 1
            if child.status != OPTIMAL:
                continue
            if child.objective >= S.prune_level():
                continue
            if np.all(S.fractional(child) <= config.int_tol):
                S.offer(child, clb, cub)
                continue
            push(child, clb, cub, depth + 1)
        if config.dive_every and processed % config.dive_every == 0:
            S.dive(pt, nlb, nub)

    if status == "optimal":
        best_bound = S.incumbent
        if not np.isfinite(S.incumbent):
            status = "infeasible"
    else:
        open_bounds = [h[2] for h in heap]
        best_bound = min([S.incumbent] + open_bounds)
    return report(status, best_bound, nodes)

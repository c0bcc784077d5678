"""Synthetic instance generation and the benchmark harness."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .bnb import SolveConfig, solve_miqp
from .model import HcpInstance

CSV_COLUMNS = ("instance_id", "seed", "dx", "dy", "n", "variant", "root_gap_pct", "time_s",
               "nodes", "cuts_added", "status")


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 50
    dx: int = 1
    dy: int = 1
    dz: int = 1
    count: int = 10
    # fixed data of the benchmark family
    q: float = 2.0
    r: float = 0.01
    s: float = 1.0
    a_diag: float = 1.5
    c: float = 0.5
    g: float = -2.3
    h: float = 2.3
    lower: float = 0.1
    upper: float = 10.0
    strict_dims: bool = True

    def __post_init__(self):
        if self.n < 1 or self.dz < 1 or self.count < 1:
            raise ValueError("n, dz and count must be positive")
        if self.strict_dims:
            if not 1 <= self.dx <= 5:
                raise ValueError(f"dx must lie in 1..5, got {self.dx}")
            if not self.dx <= self.dy <= self.dx + 4:
                raise ValueError(f"dy must lie in {self.dx}..{self.dx + 4}, got {self.dy}")
            if self.dz != 1:
                raise ValueError("the synthetic family has a single indicator")


def synthetic_rng(cfg: SyntheticConfig, seed: int) -> np.random.Generator:
    """PCG64 stream keyed by (seed, dx, dy, n); each cell gets its own stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(cfg.dx, cfg.dy, cfg.n))
    return np.random.Generator(np.random.PCG64(ss))


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> HcpInstance:
    rng = synthetic_rng(cfg, seed)
    dx, dy, dz, n = cfg.dx, cfg.dy, cfg.dz, cfg.n
    M = rng.random((dx, dx))
    A = cfg.a_diag * np.eye(dx) + M
    B = rng.random((dx, dy))
    C = np.full((dx, dz), cfg.c)
    Q = cfg.q * np.eye(dx)
    R = cfg.r * np.eye(dy)
    S = cfg.s * np.eye(dz)
    G = np.full((dy, dz), cfg.g)
    H = np.full((dy, dz), cfg.h)
    lo = np.full(dx, cfg.lower)
    hi = np.full(dx, cfg.upper)
    return HcpInstance(
        n=n, dx=dx, dy=dy, dz=dz,
        Q=[Q] * (n + 1), R=[R] * n, S=[S] * n, A=[A] * n, B=[B] * n, C=[C] * n,
        f=[np.zeros(dx)] * n, G=[G] * n, H=[H] * n, lb=[lo] * (n + 1), ub=[hi] * (n + 1),
    )


@dataclass
class BenchRow:
    instance_id: str
    seed: int | str
    dx: int
    dy: int
    n: int
    variant: str
    root_gap_pct: float
    time_s: float
    nodes: float
    cuts_added: float
    status: str
    incumbent: float = np.nan
    root_bound: float = np.nan


def _run_one(args):
    cfg, seed, variant, config = args
    inst = generate_synthetic(cfg, seed)
    iid = f"dx{cfg.dx}-dy{cfg.dy}-n{cfg.n}-s{seed}"
    try:
        rep = solve_miqp(inst, replace(config, variant=variant))
    except Exception as exc:  # recorded, never aborts the sweep
        return BenchRow(iid, seed, cfg.dx, cfg.dy, cfg.n, variant, np.nan, np.nan, np.nan, np.nan,
                        f"error:{type(exc).__name__}")
    return BenchRow(iid, seed, cfg.dx, cfg.dy, cfg.n, variant, rep.root_gap_pct, rep.time_s, rep.nodes,
                    rep.total_cuts - rep.cuts_added.get("mode-fix", 0), rep.status,
                    rep.incumbent, rep.root_bound)


def run_benchmark(cells, variants, seeds, config: SolveConfig | None = None, n: int = 10,
                  threads: int = 1, base: SyntheticConfig | None = None):
    """Solve every (cell, seed, variant); returns (detail rows, aggregate rows)."""
    config = config or SolveConfig()
    base = base or SyntheticConfig(n=n)
    jobs = []
    for dx, dy in cells:
        cfg = replace(base, dx=dx, dy=dy, n=n)
        for seed in seeds:
            for variant in variants:
                jobs.append((cfg, seed, variant, config))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    agg = []
    for dx, dy in cells:
        for variant in variants:
            sel = [r for r in rows if (r.dx, r.dy, r.variant) == (dx, dy, variant)]
            ok = [r for r in sel if not r.status.startswith("error")]

            def mean(attr):
                vals = [getattr(r, attr) for r in ok]
                return float(np.mean(vals)) if vals else np.nan

            agg.append(BenchRow(f"mean-dx{dx}-dy{dy}", "all", dx, dy, n, variant, mean("root_gap_pct"),
                                mean("time_s"), mean("nodes"), mean("cuts_added"), f"aggregate:{len(ok)}"))
    return rows, agg


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if np.isnan(v):
        return "nan"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.6g}"


def benchmark_csv(rows, agg) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in list(rows) + list(agg):
        w.writerow([_cell(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()

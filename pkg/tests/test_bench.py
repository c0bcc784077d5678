import csv
import io

import numpy as np
import pytest

from hybridcuts.bench import CSV_COLUMNS, SyntheticConfig, benchmark_csv, generate_synthetic, run_benchmark
from hybridcuts.bnb import SolveConfig
from hybridcuts.model import dumps_instance, validate

from helpers import enumerate_optimum


def test_fixed_cost_data_scalar_cell():
    inst = generate_synthetic(SyntheticConfig(n=4, dx=1, dy=1), 0)
    assert inst.Q[0][0, 0] == 2.0 and inst.R[0][0, 0] == 0.01 and inst.S[0][0, 0] == 1.0
    assert inst.C[0][0, 0] == 0.5 and inst.f[0][0] == 0.0
    assert inst.G[0][0, 0] == -2.3 and inst.H[0][0, 0] == 2.3
    assert np.all(inst.lb[3] == 0.1) and np.all(inst.ub[3] == 10.0)
    assert len(inst.Q) == 5 and len(inst.A) == 4


def test_dynamics_ranges():
    inst = generate_synthetic(SyntheticConfig(n=2, dx=4, dy=6), 3)
    A = inst.A[0]
    off = A[~np.eye(4, dtype=bool)]
    assert np.all((np.diag(A) >= 1.5) & (np.diag(A) <= 2.5))
    assert np.all((off >= 0) & (off <= 1))
    assert np.all((inst.B[0] >= 0) & (inst.B[0] <= 1))
    # time invariant
    assert all(np.array_equal(A, a) for a in inst.A)


def test_same_seed_is_bit_identical():
    cfg = SyntheticConfig(n=5, dx=2, dy=3)
    assert dumps_instance(generate_synthetic(cfg, 11)) == dumps_instance(generate_synthetic(cfg, 11))
    assert dumps_instance(generate_synthetic(cfg, 11)) != dumps_instance(generate_synthetic(cfg, 12))


def test_dimension_ranges_enforced():
    for kw in ({"dx": 6, "dy": 6}, {"dx": 2, "dy": 1}, {"dx": 1, "dy": 6}, {"dz": 2}):
        with pytest.raises(ValueError):
            SyntheticConfig(**kw)
    SyntheticConfig(dx=1, dy=6, strict_dims=False)


def test_uniform_entries_have_sane_means():
    cfg = SyntheticConfig(n=1, dx=3, dy=4)
    Ms = np.array([generate_synthetic(cfg, s).A[0] - 1.5 * np.eye(3) for s in range(100)])
    Bs = np.array([generate_synthetic(cfg, s).B[0] for s in range(100)])
    for arr in (Ms, Bs):
        means = arr.mean(axis=0)
        assert np.all((means >= 0.4) & (means <= 0.6))


@pytest.mark.parametrize("cell", [(1, 1), (2, 2), (4, 4), (1, 5)])
def test_small_instances_valid_and_feasible(cell):
    cfg = SyntheticConfig(n=3, dx=cell[0], dy=cell[1])
    for seed in range(5):
        inst = generate_synthetic(cfg, seed)
        assert validate(inst) == []
        best, _, _ = enumerate_optimum(inst)
        assert np.isfinite(best)


def _parse(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_benchmark_arity_and_format():
    rows, agg = run_benchmark([(1, 1), (2, 2)], ["miqp", "wc-g"], [0, 1, 4], SolveConfig(), n=4)
    assert len(rows) == 12 and len(agg) == 4
    text = benchmark_csv(rows, agg)
    assert "\r" not in text and text.endswith("\n")
    parsed = _parse(text)
    assert tuple(parsed[0].keys()) == CSV_COLUMNS
    assert len(parsed) == 16
    for r in parsed:
        gap = r["root_gap_pct"]
        if gap not in ("nan",) and "." in gap:
            digits = gap.lstrip("-").replace(".", "").split("e")[0].lstrip("0")
            assert len(digits) <= 6
    by = {(a.dx, a.variant): a for a in agg}
    for dx in (1, 2):
        assert by[(dx, "wc-g")].root_gap_pct <= by[(dx, "miqp")].root_gap_pct + 1e-6


def test_benchmark_rerun_identical_except_time():
    args = ([(1, 1)], ["miqp", "wc-g"], [5, 6], SolveConfig())
    a = _parse(benchmark_csv(*run_benchmark(*args, n=4)))
    b = _parse(benchmark_csv(*run_benchmark(*args, n=4)))
    for ra, rb in zip(a, b):
        ra.pop("time_s")
        rb.pop("time_s")
        assert ra == rb


def test_failures_are_recorded_not_raised(monkeypatch):
    import hybridcuts.bench as bench

    def boom(inst, config):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(bench, "solve_miqp", boom)
    rows, agg = run_benchmark([(1, 1)], ["miqp"], [0], n=3)
    assert rows[0].status == "error:RuntimeError"
    assert agg[0].status == "aggregate:0"

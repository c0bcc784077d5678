from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridcuts.bench import SyntheticConfig, generate_synthetic
from hybridcuts.bnb import SolveConfig, root_gap, solve_miqp
from hybridcuts.model import GRADIENT, InstanceError, check_feasible, direct_objective

from helpers import enumerate_optimum, random_instance, scalar_instance


def rel_close(a, b, rel=1e-6):
    return abs(a - b) <= rel * max(1.0, abs(b))


def test_root_gap_examples():
    assert root_gap(SimpleNamespace(incumbent=100.0, root_bound=60.0)) == pytest.approx(40.0)
    assert root_gap(SimpleNamespace(incumbent=7.0, root_bound=7.0)) == 0.0
    assert root_gap(SimpleNamespace(incumbent=3.0, root_bound=2.85)) == pytest.approx(5.0)
    assert np.isnan(root_gap(SimpleNamespace(incumbent=np.inf, root_bound=1.0)))


def test_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(variant="spp")
    with pytest.raises(ValueError):
        SolveConfig(time_limit=0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_two_period_scalar_matches_enumeration(seed):
    inst = random_instance(np.random.default_rng(seed), n=2, dx=1, dy=1, dz=1, exactly_one=False)
    best, _, _ = enumerate_optimum(inst)
    reports = [solve_miqp(inst, SolveConfig(variant=v)) for v in ("miqp", "wc-g")]
    for rep in reports:
        if not np.isfinite(best):
            assert rep.status == "infeasible"
            continue
        assert rep.status == "optimal"
        assert rel_close(rep.incumbent, best)
        assert check_feasible(inst, rep.x, rep.y, rep.z) <= 1e-7
        assert direct_objective(inst, rep.x, rep.y, rep.z) == pytest.approx(rep.incumbent)
        assert rep.best_bound <= rep.incumbent + 1e-6 * abs(rep.incumbent)
        assert rep.root_gap_pct >= -1e-6
    if np.isfinite(best):
        miqp, wcg = reports
        assert wcg.root_bound >= miqp.root_bound - 1e-9 * max(1.0, abs(miqp.root_bound))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_multi_mode_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, n=2, dz=2)
    best, _, _ = enumerate_optimum(inst)
    for v in ("miqp", "wc-g"):
        rep = solve_miqp(inst, SolveConfig(variant=v))
        if np.isfinite(best):
            assert rel_close(rep.incumbent, best)
        else:
            assert rep.status == "infeasible"


def test_mode_fix_at_first_period():
    # the previous state box maps strictly above the next box unless the mode acts
    inst = scalar_instance(a=1, b=0, c=-2, l1=2, u1=3, l2=0, u2=1, q1=1, q2=1, g=-1, h=1)
    rep = solve_miqp(inst, SolveConfig(variant="wc-g"))
    assert rep.fixed_periods == (1,)
    assert rep.z[0, 0] == 1.0
    assert rep.nodes == 0
    assert rep.status == "optimal"


def test_root_loop_bound_is_monotone():
    inst = generate_synthetic(SyntheticConfig(n=6, dx=1, dy=1), 4)
    bounds = []
    for k in range(0, 6):
        rep = solve_miqp(inst, SolveConfig(variant="wc-g", root_cut_rounds=k, node_limit=0))
        bounds.append(rep.root_bound)
    assert all(b2 >= b1 - 1e-9 * max(1.0, abs(b1)) for b1, b2 in zip(bounds, bounds[1:]))
    assert bounds[-1] > bounds[0]


def test_node_cuts_keep_the_optimum():
    inst = generate_synthetic(SyntheticConfig(n=6, dx=2, dy=2), 1)
    base = solve_miqp(inst, SolveConfig(variant="wc-g"))
    deep = solve_miqp(inst, SolveConfig(variant="wc-g", node_cut_rounds=3))
    assert base.status == deep.status
    if np.isfinite(base.incumbent):
        assert rel_close(deep.incumbent, base.incumbent)


def test_alternative_search_rules_agree():
    inst = random_instance(np.random.default_rng(21), n=3, dz=1, exactly_one=False)
    ref = solve_miqp(inst, SolveConfig(variant="miqp"))
    for cfg in (SolveConfig(variant="miqp", node_selection="depth-first"),
                SolveConfig(variant="miqp", branching="first-fractional"),
                SolveConfig(variant="wc-g", split_policy="all"),
                SolveConfig(variant="wc-g", threads=2)):
        rep = solve_miqp(inst, cfg)
        assert rep.status == ref.status
        if np.isfinite(ref.incumbent):
            assert rel_close(rep.incumbent, ref.incumbent)


def test_time_limit_returns_valid_pair():
    inst = generate_synthetic(SyntheticConfig(n=30, dx=2, dy=2), 2)
    rep = solve_miqp(inst, SolveConfig(variant="miqp", node_limit=3))
    assert rep.status in ("time-limit", "optimal")
    assert rep.best_bound <= rep.incumbent + 1e-9


def test_invalid_instance_rejected():
    inst = scalar_instance(r=-1.0)
    with pytest.raises(InstanceError, match="psd"):
        solve_miqp(inst)


def test_report_record_and_determinism():
    inst = generate_synthetic(SyntheticConfig(n=5, dx=1, dy=1), 7)
    a = solve_miqp(inst, SolveConfig(variant="wc-g"))
    b = solve_miqp(inst, SolveConfig(variant="wc-g"))
    strip = lambda rec: [l for l in rec.splitlines() if not l.startswith("time_s=")]
    assert strip(a.record()) == strip(b.record())
    fields = dict(l.split("=", 1) for l in a.record().splitlines())
    assert fields["status"] == "optimal"
    assert int(fields["cuts_gradient"]) == a.cuts_added[GRADIENT]

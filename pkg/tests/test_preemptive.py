import dataclasses
import itertools

import pytest

from conftest import THREE_AREA, cache_named, case_named
from helpers import build, single_node_doc, two_node_doc
from reservex.errors import ConsistencyFailure
from reservex.markets import reserve_problem, run_sequential
from reservex.preemptive import (
    PreemptiveConfig,
    emit_kkt_reserve,
    flow_ranges,
    solve_preemptive,
    solve_separation,
    verify_bilevel_consistency,
)
from reservex.solver import LinExpr, ProblemBuilder, solve_lp, solve_milp


def test_grand_coalition_base(base_cache):
    sol = base_cache.get(("a1", "a2", "a3"))
    assert sol.cost == pytest.approx(13238.0, abs=0.5)
    assert sol.chi["e1"] == pytest.approx(0.0, abs=1e-3)
    assert sol.chi["e2"] == pytest.approx(0.0592, abs=1e-3)
    assert sol.residual <= 1e-6 * sol.cost


def test_pair_a1_a2(base_cache):
    j0 = base_cache.empty().cost
    assert base_cache.cost(("a1", "a2")) == pytest.approx(j0 - 4460.5, abs=0.5)


@pytest.mark.parametrize("area", ["a1", "a2", "a3"])
def test_singletons_equal_status_quo(base_cache, area):
    assert base_cache.cost((area,)) == pytest.approx(base_cache.empty().cost, rel=1e-12)


def test_grand_solution_is_consistent(base, base_cache):
    report = verify_bilevel_consistency(base, base_cache.get(base.areas))
    assert report.ok
    assert report.worst_gap <= 1e-6


def test_consistency_detects_perturbed_chi(base, base_cache):
    sol = base_cache.get(base.areas)
    bad = dataclasses.replace(sol, chi={"e1": 0.3, "e2": 0.3})
    with pytest.raises(ConsistencyFailure):
        verify_bilevel_consistency(base, bad)
    assert not verify_bilevel_consistency(base, bad, raise_on_failure=False).ok


def test_milp_cost_matches_sequential_reclear(base, base_cache):
    sol = base_cache.get(base.areas)
    out = run_sequential(base, sol.chi, base.areas)
    assert out.expected_cost == pytest.approx(sol.cost, rel=1e-6)
    for sid, c in sol.scenario_costs.items():
        assert out.scenario_costs[sid] == pytest.approx(c, rel=1e-6)


@pytest.mark.parametrize("name", THREE_AREA)
def test_monotone_over_subsets(name):
    # a bigger coalition can always replay a smaller one's choice of chi
    case, cache = case_named(name), cache_named(name)
    costs = {}
    for k in range(len(case.areas) + 1):
        for c in itertools.combinations(case.areas, k):
            costs[frozenset(c)] = cache.cost(c)
    for small, big in itertools.product(costs, costs):
        if small < big:
            assert costs[big] <= costs[small] + 1e-6 * max(1.0, costs[small]), (sorted(small), sorted(big))


def test_kkt_reserve_toy():
    # one unit, requirement 5 up, capacity 10 at 2 EUR/MW: r = 5, requirement price 2
    doc = single_node_doc()
    doc["reserve_requirements"] = {"a1": {"up": 5.0, "down": 0.0}}
    case = build(doc)
    pb = ProblemBuilder()
    kkt = emit_kkt_reserve(pb, case, {}, 100.0)
    pb.set_objective(LinExpr())  # feasibility of the KKT system alone pins the optimum
    sol = solve_milp(pb)
    assert sol.value(kkt.primal["r+[g1]"]) == pytest.approx(5.0)
    assert sol.value(kkt.primal["r-[g1]"]) == pytest.approx(0.0)
    assert sol.value(kkt.duals["muRR+[a1]"]) == pytest.approx(2.0)
    assert sol.value(kkt.duals["muR+[g1]"]) == pytest.approx(0.0)


def test_two_node_preemptive_beats_status_quo():
    case = build(two_node_doc())
    j0 = solve_preemptive(case, ()).cost
    sol = solve_preemptive(case, ("a1", "a2"))
    assert sol.cost <= j0 + 1e-6
    report = verify_bilevel_consistency(case, sol)
    assert report.ok


def test_big_m_escalates_from_tiny_bound(base):
    # a bound far below the real prices must grow until the optimum is found
    cfg = PreemptiveConfig(big_m=1.0, max_retries=5)
    sol = solve_preemptive(base, ("a1", "a2"), cfg)
    assert sol.dual_bound > 1.0
    assert sol.cost == pytest.approx(cache_named("three_area_base").cost(("a1", "a2")), rel=1e-6)


def test_flow_ranges_contain_day_ahead_flows(base):
    ranges = flow_ranges(base)
    for chi in ([0, 0], [0, 0.0592], [0.3, 0.2]):
        out = run_sequential(base, base.chi_vector(chi), ())
        for lid, f in out.day_ahead.flows.items():
            lo, hi = ranges[lid]
            assert lo - 1e-6 <= f <= hi + 1e-6
    for ln in base.lines:
        lo, hi = ranges[ln.id]
        assert -ln.capacity - 1e-9 <= lo <= hi <= ln.capacity + 1e-9


def _brute_separation(cache, beta):
    case = cache.case
    j0 = cache.empty().cost
    best = 0.0
    for k in range(2, len(case.areas) + 1):
        for c in itertools.combinations(case.areas, k):
            best = max(best, j0 - cache.cost(c) - sum(beta[a] for a in c))
    return best


@pytest.mark.parametrize(
    "beta",
    [
        {"a1": 0.0, "a2": 0.0, "a3": 0.0},
        {"a1": 2000.0, "a2": 2000.0, "a3": 0.0},
        {"a1": 1903.15, "a2": 2729.95, "a3": 0.0},
        {"a1": 1e5, "a2": 1e5, "a3": 1e5},
    ],
)
def test_separation_matches_enumeration(base_cache, beta):
    j0 = base_cache.empty().cost
    sep = solve_separation(base_cache.case, beta, j0)
    assert sep.violation == pytest.approx(_brute_separation(base_cache, beta), abs=0.05)


def test_separation_zero_beta_selects_grand(base_cache):
    case = base_cache.case
    sep = solve_separation(case, {a: 0.0 for a in case.areas}, base_cache.empty().cost)
    assert sep.value == pytest.approx(base_cache.empty().cost - base_cache.cost(case.areas), abs=0.05)


def test_separation_huge_beta_returns_nothing(base_cache):
    case = base_cache.case
    sep = solve_separation(case, {a: 1e6 for a in case.areas}, base_cache.empty().cost)
    assert sep.violation == 0.0
    assert sep.coalition == frozenset()


def test_separation_rejects_negative_benefits(base_cache):
    with pytest.raises(ValueError):
        solve_separation(base_cache.case, {"a1": -1.0}, 0.0)


def test_unknown_area_rejected(base):
    with pytest.raises(ValueError):
        solve_preemptive(base, ("a1", "zz"))


def test_reserve_lp_dual_matches_kkt_price():
    # cross-check the KKT dual against the plain LP dual of the requirement row
    doc = single_node_doc()
    doc["reserve_requirements"] = {"a1": {"up": 5.0, "down": 0.0}}
    case = build(doc)
    sol = solve_lp(reserve_problem(case, {}, case.requirements()))
    assert sol.duals["rreq_up[a1]"] == pytest.approx(2.0)

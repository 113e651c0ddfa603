"""Sequential clearing of the reserve, day-ahead and balancing floors.

All three floors are LPs over a DC network.  ``run_sequential`` chains them for
a fixed transmission allocation ``chi`` and a coalition whose members relax
the tie-line flow freeze in balancing.  ``decompose_surpluses`` turns the
status-quo prices into a budget-balanced cost allocation per area.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import InfeasibleMarket, SolverFailure
from .model import CaseData, ReserveRequirements
from .solver import INF, ProblemBuilder, Solution, Status, lsum, solve_lp

log = logging.getLogger(__name__)

ZERO_TOL = 1e-9


@dataclass
class ReserveSolution:
    chi: dict[str, float]
    up: dict[str, float]
    down: dict[str, float]
    link_up: dict[str, float]
    link_down: dict[str, float]
    price_up: dict[str, float]
    price_down: dict[str, float]
    cost: float
    requirements: ReserveRequirements | None = None


@dataclass
class DayAheadSolution:
    dispatch: dict[str, float]
    wind: dict[str, float]
    angles: dict[str, float]
    flows: dict[str, float]
    prices: dict[str, float]
    cost: float
    flow_duals: dict[str, float] = field(default_factory=dict)


@dataclass
class BalancingSolution:
    scenario: str
    up: dict[str, float]
    down: dict[str, float]
    shed: dict[str, float]
    spill: dict[str, float]
    flows: dict[str, float]
    angles: dict[str, float]
    prices: dict[str, float]
    cost: float
    fixed_links: tuple[str, ...] = ()
    flow_duals: dict[str, float] = field(default_factory=dict)


@dataclass
class SequentialOutcome:
    chi: dict[str, float]
    coalition: frozenset[str]
    reserve: ReserveSolution
    day_ahead: DayAheadSolution
    balancing: dict[str, BalancingSolution]
    scenario_costs: dict[str, float]
    expected_cost: float


@dataclass
class AreaCostAllocation:
    # floor -> scenario (or "-" for scenario-independent floors) -> area -> value
    cs: dict[str, dict[str, dict[str, float]]]
    ps: dict[str, dict[str, dict[str, float]]]
    cr: dict[str, dict[str, dict[str, float]]]
    costs: dict[str, dict[str, float]]  # scenario -> area -> J^s_a
    floor_costs: dict[str, dict[str, float]] = field(default_factory=dict)
    degenerate: bool = False


# -- problem builders --------------------------------------------------------------


def reserve_problem(case: CaseData, chi: Mapping[str, float], rr: ReserveRequirements) -> ProblemBuilder:
    pb = ProblemBuilder("reserve")
    obj = []
    area_sum = {(a, d): [] for a in case.areas for d in "+-"}
    for g in case.generators:
        a = case.generator_area(g)
        up = pb.add_var(f"rup[{g.id}]", 0.0, g.reserve_up)
        dn = pb.add_var(f"rdn[{g.id}]", 0.0, g.reserve_down)
        obj += [g.reserve_up_cost * up, g.reserve_down_cost * dn]
        area_sum[a, "+"].append(up)
        area_sum[a, "-"].append(dn)
    for e in case.links:
        cap = chi[e.id] * e.capacity
        for d, tag in (("+", "rup"), ("-", "rdn")):
            v = pb.add_var(f"{tag}[{e.id}]", -cap, cap)
            area_sum[e.receiving_area, d].append(v)
            area_sum[e.sending_area, d].append(-1.0 * v)
    for a in case.areas:
        pb.add_constr(lsum(area_sum[a, "+"]), ">=", rr.up[a], f"rreq_up[{a}]")
        pb.add_constr(lsum(area_sum[a, "-"]), ">=", rr.down[a], f"rreq_dn[{a}]")
    pb.set_objective(lsum(obj))
    return pb


def day_ahead_problem(case: CaseData, chi: Mapping[str, float], reserve: ReserveSolution) -> ProblemBuilder:
    pb = ProblemBuilder("day_ahead")
    inj = {n.id: [] for n in case.nodes}
    obj = []
    for g in case.generators:
        lo = reserve.down.get(g.id, 0.0)
        hi = g.capacity - reserve.up.get(g.id, 0.0)
        p = pb.add_var(f"p[{g.id}]", lo, max(lo, hi))
        obj.append(g.cost * p)
        inj[g.node].append(p)
    for j in case.wind_farms:
        w = pb.add_var(f"w[{j.id}]", 0.0, j.expected)
        inj[j.node].append(w)
    line_chi = case.line_chi(chi)
    _network(pb, case, inj, {ln.id: (1.0 - line_chi[ln.id]) * ln.capacity for ln in case.lines}, "")
    for n in case.nodes:
        pb.add_constr(lsum(inj[n.id]), "==", n.demand, f"bal[{n.id}]")
    pb.set_objective(lsum(obj))
    return pb


def _network(pb, case, inj, limits, suffix):
    """Angle-based DC flows; appends flow terms to the nodal injection lists."""
    theta = {n.id: pb.add_var(f"theta{suffix}[{n.id}]", -INF, INF) for n in case.nodes}
    for ln in case.lines:
        f = pb.add_var(f"f{suffix}[{ln.id}]", -limits[ln.id], limits[ln.id])
        pb.add_constr(f - ln.susceptance * (theta[ln.from_node] - theta[ln.to_node]), "==", 0.0, f"flow{suffix}[{ln.id}]")
        inj[ln.from_node].append(-1.0 * f)
        inj[ln.to_node].append(f)
    pb.add_constr(theta[case.reference_node], "==", 0.0, f"ref{suffix}")


def fixed_tie_links(case: CaseData, chi: Mapping[str, float], coalition: Iterable[str]) -> list[str]:
    """Links whose tie-line flows stay at day-ahead values in balancing.

    A link keeps its day-ahead flow unless capacity was set aside for it
    (chi > 0) or both of its areas belong to the coordinating coalition.
    """
    members = set(coalition)
    return [
        e.id
        for e in case.links
        if chi[e.id] <= ZERO_TOL and not (e.sending_area in members and e.receiving_area in members)
    ]


def balancing_problem(
    case: CaseData,
    reserve: ReserveSolution,
    day_ahead: DayAheadSolution,
    scenario_id: str,
    fixed_links: Iterable[str],
) -> ProblemBuilder:
    s = case.scenario(scenario_id)
    pb = ProblemBuilder(f"balancing[{s.id}]")
    inj = {n.id: [] for n in case.nodes}
    obj = []
    for g in case.generators:
        up = pb.add_var(f"pup[{g.id}]", 0.0, reserve.up.get(g.id, 0.0))
        dn = pb.add_var(f"pdn[{g.id}]", 0.0, reserve.down.get(g.id, 0.0))
        obj.append(g.cost * (up - dn))
        inj[g.node] += [up, -1.0 * dn]
    for n in case.nodes:
        if n.demand > 0:
            sh = pb.add_var(f"shed[{n.id}]", 0.0, n.demand)
            obj.append(case.shed_cost * sh)
            inj[n.id].append(sh)
    rhs = {n.id: 0.0 for n in case.nodes}
    for j in case.wind_farms:
        sp = pb.add_var(f"spill[{j.id}]", 0.0, s.wind[j.id])
        inj[j.node].append(-1.0 * sp)
        rhs[j.node] += day_ahead.wind[j.id] - s.wind[j.id]
    fixed_lines = {lid for e in fixed_links for lid in case.link_by_id[e].lines}
    limits = {ln.id: ln.capacity for ln in case.lines}
    _network(pb, case, inj, limits, "")
    for ln in case.lines:
        rhs[ln.from_node] -= day_ahead.flows[ln.id]
        rhs[ln.to_node] += day_ahead.flows[ln.id]
        if ln.id in fixed_lines:
            pb.add_constr(pb.var(f"f[{ln.id}]"), "==", day_ahead.flows[ln.id], f"fix[{ln.id}]")
    for n in case.nodes:
        pb.add_constr(lsum(inj[n.id]), "==", rhs[n.id], f"bal[{n.id}]")
    pb.set_objective(lsum(obj))
    return pb


# -- clearing ---------------------------------------------------------------------


def _solve(pb: ProblemBuilder, what: str, backend=None) -> Solution:
    sol = solve_lp(pb, backend)
    if sol.status is Status.INFEASIBLE:
        raise InfeasibleMarket(f"{what} market is infeasible")
    if not sol.ok:
        raise SolverFailure(f"{what} market: solver status {sol.status.value}")
    return sol


def _pick(sol: Solution, prefix: str, ids) -> dict[str, float]:
    return {k: _clean(sol.by_name(f"{prefix}[{k}]")) for k in ids}


def _clean(v: float) -> float:
    return 0.0 if abs(v) < ZERO_TOL else float(v)


def clear_reserve(
    case: CaseData, chi: Mapping[str, float] | None = None, rr: ReserveRequirements | None = None, backend=None
) -> ReserveSolution:
    chi = case.chi_vector(chi)
    rr = rr or case.requirements()
    sol = _solve(reserve_problem(case, chi, rr), "reserve", backend)
    gids = [g.id for g in case.generators]
    eids = [e.id for e in case.links]
    return ReserveSolution(
        chi=dict(chi),
        up=_pick(sol, "rup", gids),
        down=_pick(sol, "rdn", gids),
        link_up=_pick(sol, "rup", eids),
        link_down=_pick(sol, "rdn", eids),
        price_up={a: _clean(sol.dual(f"rreq_up[{a}]")) for a in case.areas},
        price_down={a: _clean(sol.dual(f"rreq_dn[{a}]")) for a in case.areas},
        cost=sol.objective,
        requirements=rr,
    )


def clear_day_ahead(case: CaseData, chi: Mapping[str, float] | None, reserve: ReserveSolution, backend=None) -> DayAheadSolution:
    chi = case.chi_vector(chi)
    sol = _solve(day_ahead_problem(case, chi, reserve), "day-ahead", backend)
    return DayAheadSolution(
        dispatch=_pick(sol, "p", [g.id for g in case.generators]),
        wind=_pick(sol, "w", [j.id for j in case.wind_farms]),
        angles=_pick(sol, "theta", [n.id for n in case.nodes]),
        flows=_pick(sol, "f", [ln.id for ln in case.lines]),
        prices={n.id: _clean(sol.dual(f"bal[{n.id}]")) for n in case.nodes},
        cost=sol.objective,
        flow_duals={ln.id: _clean(sol.dual(f"flow[{ln.id}]")) for ln in case.lines},
    )


def clear_balancing(
    case: CaseData,
    chi: Mapping[str, float] | None,
    reserve: ReserveSolution,
    day_ahead: DayAheadSolution,
    scenario: str,
    coalition: Iterable[str] = (),
    backend=None,
) -> BalancingSolution:
    chi = case.chi_vector(chi)
    fixed = fixed_tie_links(case, chi, coalition)
    pb = balancing_problem(case, reserve, day_ahead, scenario, fixed)
    sol = solve_lp(pb, backend)
    if not sol.ok:
        # shedding and spillage make every scenario feasible
        raise SolverFailure(f"balancing LP for {scenario} returned {sol.status.value}")
    return BalancingSolution(
        scenario=scenario,
        up=_pick(sol, "pup", [g.id for g in case.generators]),
        down=_pick(sol, "pdn", [g.id for g in case.generators]),
        shed=_pick(sol, "shed", [n.id for n in case.nodes if n.demand > 0]),
        spill=_pick(sol, "spill", [j.id for j in case.wind_farms]),
        flows=_pick(sol, "f", [ln.id for ln in case.lines]),
        angles=_pick(sol, "theta", [n.id for n in case.nodes]),
        prices={n.id: _clean(sol.dual(f"bal[{n.id}]")) for n in case.nodes},
        cost=sol.objective,
        fixed_links=tuple(fixed),
        flow_duals={ln.id: _clean(sol.dual(f"flow[{ln.id}]")) for ln in case.lines},
    )


def run_sequential(
    case: CaseData,
    chi: Mapping[str, float] | None = None,
    coalition: Iterable[str] = (),
    backend=None,
    threads: int = 1,
) -> SequentialOutcome:
    """Clear reserve, day-ahead and every balancing scenario in order."""
    chi = case.chi_vector(chi)
    coalition = frozenset(coalition)
    res = clear_reserve(case, chi, backend=backend)
    da = clear_day_ahead(case, chi, res, backend=backend)

    def one(sid):
        return clear_balancing(case, chi, res, da, sid, coalition, backend)

    sids = [s.id for s in case.scenarios]
    if threads > 1 and len(sids) > 1:
        with ThreadPoolExecutor(threads) as ex:
            bals = list(ex.map(one, sids))
    else:
        bals = [one(sid) for sid in sids]
    bal = dict(zip(sids, bals))
    per = {sid: res.cost + da.cost + bal[sid].cost for sid in sids}
    exp = sum(s.probability * per[s.id] for s in case.scenarios)
    return SequentialOutcome(chi, coalition, res, da, bal, per, exp)


# -- surplus decomposition --------------------------------------------------------


def decompose_surpluses(case: CaseData, outcome: SequentialOutcome) -> AreaCostAllocation:
    """Split each floor's cost into consumer/producer surplus and congestion rent.

    Money flows are settled at the floor's dual prices (zonal for reserves,
    nodal otherwise).  Intra-area rent stays with the area, tie-line and
    reserve-exchange rent is split evenly between the two ends.
    """
    areas = case.areas
    res, da = outcome.reserve, outcome.day_ahead

    def zero():
        return {a: 0.0 for a in areas}

    cs, ps, cr = {}, {}, {}

    # reserve floor
    rr = res.requirements or case.requirements()
    c, p, r = zero(), zero(), zero()
    for a in areas:
        c[a] -= res.price_up[a] * rr.up[a] + res.price_down[a] * rr.down[a]
    for g in case.generators:
        a = case.generator_area(g)
        p[a] += (res.price_up[a] - g.reserve_up_cost) * res.up[g.id]
        p[a] += (res.price_down[a] - g.reserve_down_cost) * res.down[g.id]
    for e in case.links:
        rent = res.link_up[e.id] * (res.price_up[e.receiving_area] - res.price_up[e.sending_area])
        rent += res.link_down[e.id] * (res.price_down[e.receiving_area] - res.price_down[e.sending_area])
        r[e.receiving_area] += rent / 2
        r[e.sending_area] += rent / 2
    cs["reserve"], ps["reserve"], cr["reserve"] = {"-": c}, {"-": p}, {"-": r}

    # day-ahead floor
    lam = da.prices
    c, p, r = zero(), zero(), zero()
    for n in case.nodes:
        c[n.area] -= lam[n.id] * n.demand
    for g in case.generators:
        p[case.generator_area(g)] += (lam[g.node] - g.cost) * da.dispatch[g.id]
    for j in case.wind_farms:
        p[case.wind_area(j)] += lam[j.node] * da.wind[j.id]
    _rent(case, da.flows, lam, da.flow_duals, r)
    cs["day_ahead"], ps["day_ahead"], cr["day_ahead"] = {"-": c}, {"-": p}, {"-": r}

    # balancing floor, per scenario
    cs["balancing"], ps["balancing"], cr["balancing"] = {}, {}, {}
    for s in case.scenarios:
        b = outcome.balancing[s.id]
        lam = b.prices
        c, p, r = zero(), zero(), zero()
        for g in case.generators:
            p[case.generator_area(g)] += (lam[g.node] - g.cost) * (b.up[g.id] - b.down[g.id])
        for j in case.wind_farms:
            dev = s.wind[j.id] - da.wind[j.id] - b.spill[j.id]
            p[case.wind_area(j)] += lam[j.node] * dev
        for nid, l in b.shed.items():
            c[case.node_area[nid]] += (lam[nid] - case.shed_cost) * l
        delta = {lid: b.flows[lid] - da.flows[lid] for lid in b.flows}
        _rent(case, delta, lam, b.flow_duals, r)
        cs["balancing"][s.id], ps["balancing"][s.id], cr["balancing"][s.id] = c, p, r

    costs = {}
    for s in case.scenarios:
        costs[s.id] = {}
        for a in areas:
            tot = 0.0
            for floor, key in (("reserve", "-"), ("day_ahead", "-"), ("balancing", s.id)):
                tot += cs[floor][key][a] + ps[floor][key][a] + cr[floor][key][a]
            costs[s.id][a] = -tot
    floor_costs = {"reserve": {"-": res.cost}, "day_ahead": {"-": da.cost}, "balancing": {}}
    for s in case.scenarios:
        floor_costs["balancing"][s.id] = outcome.balancing[s.id].cost
    return AreaCostAllocation(cs, ps, cr, costs, floor_costs)


def _rent(case: CaseData, flows, prices, flow_duals, out: dict) -> None:
    """Charge each line its flow times the shadow price of its own limit.

    The nodal price spread across a line minus the dual of its flow
    definition row isolates the limit's shadow price, so unconstrained lines
    earn nothing even when loop flows separate the prices at their ends.
    The per-line terms still add up to the total merchandise surplus.
    """
    for ln in case.lines:
        rent = flows[ln.id] * (prices[ln.to_node] - prices[ln.from_node] + flow_duals[ln.id])
        fa, ta = case.line_areas(ln)
        if fa == ta:
            out[fa] += rent
        else:
            out[fa] += rent / 2
            out[ta] += rent / 2


def budget_residuals(case: CaseData, alloc: AreaCostAllocation) -> dict[tuple[str, str], float]:
    """Per floor and scenario: sum of area surpluses plus the floor cost (should be 0)."""
    out = {}
    for floor, per in alloc.floor_costs.items():
        for key, cost in per.items():
            tot = sum(alloc.cs[floor][key][a] + alloc.ps[floor][key][a] + alloc.cr[floor][key][a] for a in case.areas)
            out[floor, key] = tot + cost
    return out


# -- tables ------------------------------------------------------------------------


def cost_table(case: CaseData, outcome: SequentialOutcome) -> list[dict]:
    """Stage costs per scenario plus the expectation."""
    rows = []
    for s in case.scenarios:
        rows.append(
            {
                "scenario": s.id,
                "probability": s.probability,
                "reserve": outcome.reserve.cost,
                "day_ahead": outcome.day_ahead.cost,
                "balancing": outcome.balancing[s.id].cost,
                "total": outcome.scenario_costs[s.id],
            }
        )
    exp_bal = sum(s.probability * outcome.balancing[s.id].cost for s in case.scenarios)
    rows.append(
        {
            "scenario": "expected",
            "probability": 1.0,
            "reserve": outcome.reserve.cost,
            "day_ahead": outcome.day_ahead.cost,
            "balancing": exp_bal,
            "total": outcome.expected_cost,
        }
    )
    return rows


def allocation_table(case: CaseData, alloc: AreaCostAllocation) -> list[dict]:
    rows = []
    for floor in ("reserve", "day_ahead", "balancing"):
        for key in alloc.cs[floor]:
            for kind, src in (("CS", alloc.cs), ("PS", alloc.ps), ("CR", alloc.cr)):
                row = {"floor": floor, "scenario": key, "component": kind}
                row.update({a: src[floor][key][a] for a in case.areas})
                rows.append(row)
    for sid, per in alloc.costs.items():
        row = {"floor": "total", "scenario": sid, "component": "J"}
        row.update(per)
        rows.append(row)
    return rows


def dispatch_table(case: CaseData, outcome: SequentialOutcome) -> list[dict]:
    """Quantities per unit: reserves, day-ahead schedule and balancing deviations."""
    res, da = outcome.reserve, outcome.day_ahead
    rows = []
    for g in case.generators:
        row = {"unit": g.id, "r_down": res.down[g.id], "r_up": res.up[g.id], "day_ahead": da.dispatch[g.id]}
        for s in case.scenarios:
            b = outcome.balancing[s.id]
            row[s.id] = b.up[g.id] - b.down[g.id]
        rows.append(row)
    for j in case.wind_farms:
        row = {"unit": j.id, "r_down": 0.0, "r_up": 0.0, "day_ahead": da.wind[j.id]}
        for s in case.scenarios:
            row[s.id] = s.wind[j.id] - da.wind[j.id] - outcome.balancing[s.id].spill[j.id]
        rows.append(row)
    for e in case.links:
        row = {"unit": e.id, "r_down": res.link_down[e.id], "r_up": res.link_up[e.id], "day_ahead": 0.0}
        row.update({s.id: 0.0 for s in case.scenarios})
        rows.append(row)
    for s in case.scenarios:
        shed = sum(outcome.balancing[s.id].shed.values())
        row = {"unit": f"shed_{s.id}", "r_down": 0.0, "r_up": 0.0, "day_ahead": 0.0}
        row.update({t.id: (shed if t.id == s.id else 0.0) for t in case.scenarios})
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict], path=None, digits: int = 4) -> str:
    """Serialize table rows; floats are rounded for byte-stable output."""
    buf = io.StringIO()
    if rows:
        fields = list(rows[0].keys())
        for r in rows[1:]:
            for k in r:
                if k not in fields:
                    fields.append(k)
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v, digits) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def _fmt(v, digits):
    if isinstance(v, float):
        v = round(v, digits)
        return "0" if v == 0 else f"{v:.{digits}f}".rstrip("0").rstrip(".")
    return v

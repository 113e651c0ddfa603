"""Preemptive transmission allocation as a single-level MILP.

The reserve and day-ahead clearings are lower-level LPs whose optimality is
enforced through KKT conditions.  Complementarity is linearized with one
binary per pair and data-derived big-M bounds.  The balancing stage sits in
the upper level, one block per scenario.

``solve_separation`` reuses the same building blocks with area-selection
binaries to find the coalition with the largest stability violation for a
given benefit vector.
"""

from __future__ import annotations

import itertools
import logging
import math
import threading
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .errors import BigMViolation, ConsistencyFailure, SolverFailure
from .markets import (
    SequentialOutcome,
    clear_day_ahead,
    clear_reserve,
    run_sequential,
)
from .model import CaseData, coalition_mask, mask_coalition
from .solver import INF, LinExpr, ProblemBuilder, Solution, Status, Var, lsum, max_violation, solve_lp, solve_milp

log = logging.getLogger(__name__)


@dataclass
class PreemptiveConfig:
    rel_gap: float = 1e-6
    comp_tol: float = 1e-6
    big_m: float | None = None  # initial dual bound in EUR/MW; None derives it from prices
    big_m_factor: float = 10.0
    max_retries: int = 3
    milp_time_limit: float | None = None
    backend: str | None = None
    threads: int = 1
    lp_dump: str | None = None  # path prefix for LP files of every built MILP

    def initial_dual_bound(self, case: CaseData) -> float:
        if self.big_m is not None:
            return float(self.big_m)
        prices = [case.shed_cost]
        for g in case.generators:
            prices += [g.cost, g.reserve_up_cost, g.reserve_down_cost]
        return self.big_m_factor * max(prices)


@dataclass
class CompPair:
    name: str
    slack: LinExpr
    dual: Var
    z: Var
    slack_bound: float
    dual_bound: float


@dataclass
class KktBlock:
    duals: dict[str, Var] = field(default_factory=dict)
    pairs: list[CompPair] = field(default_factory=list)
    primal: dict[str, LinExpr | Var] = field(default_factory=dict)
    bounded_free: list[tuple[str, Var, float]] = field(default_factory=list)

    def add_pair(self, pb: ProblemBuilder, name: str, slack, dual: Var, slack_bound: float, dual_bound: float):
        """Register ``0 <= slack ⊥ dual >= 0`` and emit its big-M rows."""
        slack = LinExpr.of(slack)
        z = pb.add_binary(f"z[{name}]")
        sb = max(float(slack_bound), 1e-6)
        pb.add_constr(slack, ">=", 0.0, f"pf[{name}]")
        pb.add_constr(slack + sb * z, "<=", sb, f"ms[{name}]")
        pb.add_constr(dual - dual_bound * z, "<=", 0.0, f"md[{name}]")
        self.pairs.append(CompPair(name, slack, dual, z, sb, dual_bound))


@dataclass
class PreemptiveSolution:
    coalition: frozenset[str]
    chi: dict[str, float]
    cost: float
    reserve_cost: float
    day_ahead_cost: float
    balancing_costs: dict[str, float]
    scenario_costs: dict[str, float]
    mip_gap: float | None
    residual: float
    dual_bound: float
    status: Status = Status.OPTIMAL
    primal: dict[str, float] = field(default_factory=dict, repr=False)
    from_sequential: bool = False


@dataclass
class SeparationSolution:
    selected: dict[str, int]
    coalition: frozenset[str]
    objective: float
    violation: float
    value: float
    chi: dict[str, float] = field(default_factory=dict)
    scenario_costs: dict[str, float] = field(default_factory=dict)


# -- lower level: KKT blocks --------------------------------------------------------


def emit_kkt_reserve(pb: ProblemBuilder, case: CaseData, chi: Mapping[str, LinExpr | float], M: float) -> KktBlock:
    """Primal rows, dual variables, stationarity and complementarity of the reserve LP."""
    kkt = KktBlock()
    rr = case.requirements()
    area_terms = {(a, d): [] for a in case.areas for d in "+-"}
    red_cost = {}
    for g in case.generators:
        a = case.generator_area(g)
        for d, cap, c in (("+", g.reserve_up, g.reserve_up_cost), ("-", g.reserve_down, g.reserve_down_cost)):
            if cap <= 0:
                kkt.primal[f"r{d}[{g.id}]"] = LinExpr()
                continue
            r = pb.add_var(f"r{d}[{g.id}]", 0.0, cap)
            kkt.primal[f"r{d}[{g.id}]"] = r
            area_terms[a, d].append(r)
            mu = pb.add_var(f"muR{d}[{g.id}]", 0.0, M)
            kkt.duals[f"muR{d}[{g.id}]"] = mu
            kkt.add_pair(pb, f"R{d}[{g.id}]", cap - r, mu, cap, M)
            red_cost[g.id, d] = (c, mu, r, cap)
    link_vars = {}
    for e in case.links:
        T = e.capacity
        x = LinExpr.of(chi[e.id])
        for d in "+-":
            r = pb.add_var(f"r{d}[{e.id}]", -T, T)
            kkt.primal[f"r{d}[{e.id}]"] = r
            link_vars[e.id, d] = r
            area_terms[e.receiving_area, d].append(r)
            area_terms[e.sending_area, d].append(-1.0 * r)
            zl = pb.add_var(f"zetaL{d}[{e.id}]", 0.0, M)
            zu = pb.add_var(f"zetaU{d}[{e.id}]", 0.0, M)
            kkt.duals[f"zetaL{d}[{e.id}]"] = zl
            kkt.duals[f"zetaU{d}[{e.id}]"] = zu
            kkt.add_pair(pb, f"RXL{d}[{e.id}]", r + T * x, zl, 2 * T, M)
            kkt.add_pair(pb, f"RXU{d}[{e.id}]", T * x - r, zu, 2 * T, M)
    mu_rr = {}
    for a in case.areas:
        for d, need in (("+", rr.up[a]), ("-", rr.down[a])):
            mu = pb.add_var(f"muRR{d}[{a}]", 0.0, M)
            mu_rr[a, d] = mu
            kkt.duals[f"muRR{d}[{a}]"] = mu
            cap = sum(
                (g.reserve_up if d == "+" else g.reserve_down)
                for g in case.generators
                if case.generator_area(g) == a
            )
            cap += sum(e.capacity for e in case.links if e.touches(a))
            kkt.add_pair(pb, f"RR{d}[{a}]", lsum(area_terms[a, d]) - need, mu, max(cap - need, 0.0) + 1.0, M)
    # stationarity of unit reserves: C + muR - muRR >= 0, complementary to r
    for (gid, d), (c, mu, r, cap) in red_cost.items():
        a = case.node_area[next(g.node for g in case.generators if g.id == gid)]
        dual_slack = c + mu - mu_rr[a, d]
        kkt.add_pair(pb, f"SR{d}[{gid}]", r, _slack_var(pb, f"sr{d}[{gid}]", dual_slack, c + M), cap, c + M)
    # stationarity of link exchanges (free variables): equality
    for e in case.links:
        for d in "+-":
            expr = mu_rr[e.receiving_area, d] - mu_rr[e.sending_area, d]
            expr = expr + kkt.duals[f"zetaL{d}[{e.id}]"] - kkt.duals[f"zetaU{d}[{e.id}]"]
            pb.add_constr(expr, "==", 0.0, f"st_rx{d}[{e.id}]")
    kkt.primal["cost"] = lsum(
        c * r for (gid, d), (c, mu, r, cap) in red_cost.items()
    )
    return kkt


def _slack_var(pb: ProblemBuilder, name: str, expr: LinExpr, ub: float) -> Var:
    """Nonnegative variable equal to ``expr`` (a reduced cost), bounded by ``ub``."""
    v = pb.add_var(name, 0.0, ub)
    pb.add_constr(v - expr, "==", 0.0, f"def_{name}")
    return v


@lru_cache(maxsize=16)
def flow_ranges(case: CaseData) -> dict[str, tuple[float, float]]:
    """Smallest and largest day-ahead flow each line can carry.

    Bounds come from a relaxation of the day-ahead feasible set (any reserve
    schedule, any transmission allocation), so they hold for every coalition.
    A limit outside its line's range can never bind; its complementarity pair
    is dropped, which keeps the MILP small on larger networks.
    """
    pb = ProblemBuilder("flow_ranges")
    inj = {n.id: [] for n in case.nodes}
    for g in case.generators:
        inj[g.node].append(pb.add_var(f"p[{g.id}]", 0.0, g.capacity))
    for j in case.wind_farms:
        inj[j.node].append(pb.add_var(f"w[{j.id}]", 0.0, j.expected))
    theta = {n.id: pb.add_var(f"theta[{n.id}]", -INF, INF) for n in case.nodes}
    flows = {}
    for ln in case.lines:
        f = flows[ln.id] = pb.add_var(f"f[{ln.id}]", -ln.capacity, ln.capacity)
        pb.add_constr(f - ln.susceptance * (theta[ln.from_node] - theta[ln.to_node]), "==", 0.0, f"flow[{ln.id}]")
        inj[ln.from_node].append(-1.0 * f)
        inj[ln.to_node].append(f)
    pb.add_constr(theta[case.reference_node], "==", 0.0, "ref")
    for n in case.nodes:
        pb.add_constr(lsum(inj[n.id]), "==", n.demand, f"bal[{n.id}]")
    out = {}
    for ln in case.lines:
        ends = []
        for sense in ("min", "max"):
            pb.set_objective(flows[ln.id], sense)
            sol = solve_lp(pb)
            if not sol.ok:
                return {l.id: (-l.capacity, l.capacity) for l in case.lines}
            ends.append(sol.objective)
        out[ln.id] = (ends[0], ends[1])
    return out


def emit_kkt_day_ahead(
    pb: ProblemBuilder, case: CaseData, chi: Mapping[str, LinExpr | float], reserve: KktBlock, M: float
) -> KktBlock:
    """KKT system of the day-ahead LP with reserve quantities as parameters."""
    kkt = KktBlock()
    inj = {n.id: [] for n in case.nodes}
    lam = {}
    for n in case.nodes:
        lam[n.id] = pb.add_var(f"lambda[{n.id}]", -M, M)
        kkt.duals[f"lambda[{n.id}]"] = lam[n.id]
        kkt.bounded_free.append((f"lambda[{n.id}]", lam[n.id], M))
    cost_terms = []
    for g in case.generators:
        p = pb.add_var(f"p[{g.id}]", 0.0, g.capacity)
        kkt.primal[f"p[{g.id}]"] = p
        inj[g.node].append(p)
        cost_terms.append(g.cost * p)
        rup = reserve.primal[f"r+[{g.id}]"]
        rdn = reserve.primal[f"r-[{g.id}]"]
        mpl = pb.add_var(f"muPL[{g.id}]", 0.0, M)
        mpu = pb.add_var(f"muPU[{g.id}]", 0.0, M)
        kkt.duals[f"muPL[{g.id}]"] = mpl
        kkt.duals[f"muPU[{g.id}]"] = mpu
        kkt.add_pair(pb, f"PL[{g.id}]", p - rdn, mpl, g.capacity, M)
        kkt.add_pair(pb, f"PU[{g.id}]", g.capacity - rup - p, mpu, g.capacity, M)
        pb.add_constr(g.cost - lam[g.node] - mpl + mpu, "==", 0.0, f"st_p[{g.id}]")
    for j in case.wind_farms:
        w = pb.add_var(f"w[{j.id}]", 0.0, j.expected)
        kkt.primal[f"w[{j.id}]"] = w
        inj[j.node].append(w)
        mwu = pb.add_var(f"muWU[{j.id}]", 0.0, M)
        kkt.duals[f"muWU[{j.id}]"] = mwu
        kkt.add_pair(pb, f"WU[{j.id}]", j.expected - w, mwu, j.expected, M)
        red = _slack_var(pb, f"sw[{j.id}]", mwu - lam[j.node], 2 * M)
        kkt.add_pair(pb, f"SW[{j.id}]", w, red, j.expected, 2 * M)
    line_chi = {}
    for ln in case.lines:
        line_chi[ln.id] = LinExpr.of(chi[ln.tie_link]) if ln.tie_link else LinExpr()
    theta = {n.id: pb.add_var(f"theta[{n.id}]", -INF, INF) for n in case.nodes}
    ranges = flow_ranges(case)
    kappa = {}
    for ln in case.lines:
        T = ln.capacity
        f = pb.add_var(f"f[{ln.id}]", -T, T)
        kkt.primal[f"f[{ln.id}]"] = f
        pb.add_constr(f - ln.susceptance * (theta[ln.from_node] - theta[ln.to_node]), "==", 0.0, f"flow[{ln.id}]")
        inj[ln.from_node].append(-1.0 * f)
        inj[ln.to_node].append(f)
        k = pb.add_var(f"kappa[{ln.id}]", -INF, INF)
        kappa[ln.id] = k
        kkt.duals[f"kappa[{ln.id}]"] = k
        zl = pb.add_var(f"zetaFL[{ln.id}]", 0.0, M)
        zu = pb.add_var(f"zetaFU[{ln.id}]", 0.0, M)
        kkt.duals[f"zetaFL[{ln.id}]"] = zl
        kkt.duals[f"zetaFU[{ln.id}]"] = zu
        avail = T - T * line_chi[ln.id]
        lo, hi = ranges[ln.id]
        fixed = not avail.terms
        margin = 1e-6 * max(1.0, T)
        if fixed and lo > -avail.const + margin:
            pb.add_constr(zl, "==", 0.0, f"off[FL[{ln.id}]]")
        else:
            kkt.add_pair(pb, f"FL[{ln.id}]", f + avail, zl, T + hi, M)
        if fixed and hi < avail.const - margin:
            pb.add_constr(zu, "==", 0.0, f"off[FU[{ln.id}]]")
        else:
            kkt.add_pair(pb, f"FU[{ln.id}]", avail - f, zu, T - lo, M)
        pb.add_constr(lam[ln.from_node] - lam[ln.to_node] - k - zl + zu, "==", 0.0, f"st_f[{ln.id}]")
    rho = pb.add_var("rho_ref", -INF, INF)
    kkt.duals["rho_ref"] = rho
    pb.add_constr(theta[case.reference_node], "==", 0.0, "ref")
    for n in case.nodes:
        terms = [ln.susceptance * kappa[ln.id] for ln in case.lines if ln.from_node == n.id]
        terms += [-ln.susceptance * kappa[ln.id] for ln in case.lines if ln.to_node == n.id]
        if n.id == case.reference_node:
            terms.append(-1.0 * rho)
        pb.add_constr(lsum(terms), "==", 0.0, f"st_theta[{n.id}]")
        pb.add_constr(lsum(inj[n.id]), "==", n.demand, f"bal[{n.id}]")
    kkt.primal["cost"] = lsum(cost_terms)
    return kkt


# -- upper level ---------------------------------------------------------------------


def _balancing_block(pb, case, s, res: KktBlock, da: KktBlock, fix_rows: Callable):
    """Re-dispatch LP of one scenario; returns its cost expression."""
    sfx = f"@{s.id}"
    inj = {n.id: [] for n in case.nodes}
    rhs_terms = {n.id: [] for n in case.nodes}
    cost = []
    for g in case.generators:
        rup = res.primal[f"r+[{g.id}]"]
        rdn = res.primal[f"r-[{g.id}]"]
        if not LinExpr.of(rup).terms and not LinExpr.of(rdn).terms:
            continue
        up = pb.add_var(f"pup[{g.id}]{sfx}", 0.0, g.reserve_up)
        dn = pb.add_var(f"pdn[{g.id}]{sfx}", 0.0, g.reserve_down)
        pb.add_constr(up - rup, "<=", 0.0, f"bup[{g.id}]{sfx}")
        pb.add_constr(dn - rdn, "<=", 0.0, f"bdn[{g.id}]{sfx}")
        cost.append(g.cost * (up - dn))
        inj[g.node] += [up, -1.0 * dn]
    for n in case.nodes:
        if n.demand > 0:
            sh = pb.add_var(f"shed[{n.id}]{sfx}", 0.0, n.demand)
            cost.append(case.shed_cost * sh)
            inj[n.id].append(sh)
    for j in case.wind_farms:
        sp = pb.add_var(f"spill[{j.id}]{sfx}", 0.0, s.wind[j.id])
        inj[j.node].append(-1.0 * sp)
        # W - w_hat - spill enters as injection
        inj[j.node].append(s.wind[j.id] - da.primal[f"w[{j.id}]"])
    theta = {n.id: pb.add_var(f"theta[{n.id}]{sfx}", -INF, INF) for n in case.nodes}
    for ln in case.lines:
        f = pb.add_var(f"f[{ln.id}]{sfx}", -ln.capacity, ln.capacity)
        fhat = da.primal[f"f[{ln.id}]"]
        pb.add_constr(f - ln.susceptance * (theta[ln.from_node] - theta[ln.to_node]), "==", 0.0, f"flow[{ln.id}]{sfx}")
        # A (f_hat - f_s): flow change leaves the from-node
        inj[ln.from_node].append(fhat - f)
        inj[ln.to_node].append(f - fhat)
        fix_rows(pb, ln, f, fhat, sfx)
    pb.add_constr(theta[case.reference_node], "==", 0.0, f"ref{sfx}")
    for n in case.nodes:
        pb.add_constr(lsum(inj[n.id]), "==", 0.0, f"bal[{n.id}]{sfx}")
    return lsum(cost)


def _chi_vars(pb: ProblemBuilder, case: CaseData, free: Iterable[str]) -> dict[str, LinExpr | float]:
    free = set(free)
    chi = {}
    for e in case.links:
        if e.id in free:
            chi[e.id] = LinExpr.of(pb.add_var(f"chi[{e.id}]", 0.0, 1.0))
        else:
            chi[e.id] = float(case.existing_chi[e.id])
    return chi


@dataclass
class _Built:
    pb: ProblemBuilder
    chi: dict
    res: KktBlock
    da: KktBlock
    bal_costs: dict[str, LinExpr]
    select: dict[str, Var] = field(default_factory=dict)


def build_preemptive(case: CaseData, coalition: Iterable[str], M: float) -> _Built:
    members = set(coalition)
    free = [e.id for e in case.links if e.sending_area in members and e.receiving_area in members]
    pb = ProblemBuilder("preemptive")
    chi = _chi_vars(pb, case, free)
    res = emit_kkt_reserve(pb, case, chi, M)
    da = emit_kkt_day_ahead(pb, case, chi, res, M)
    fixed_lines = {
        lid
        for e in case.links
        if e.id not in free and case.existing_chi[e.id] <= 0.0
        for lid in e.lines
    }

    def fix_rows(pb, ln, f, fhat, sfx):
        if ln.id in fixed_lines:
            pb.add_constr(f - fhat, "==", 0.0, f"fix[{ln.id}]{sfx}")

    bal = {s.id: _balancing_block(pb, case, s, res, da, fix_rows) for s in case.scenarios}
    obj = res.primal["cost"] + da.primal["cost"]
    for s in case.scenarios:
        obj = obj + s.probability * bal[s.id]
    pb.set_objective(obj)
    return _Built(pb, chi, res, da, bal)


def build_separation(case: CaseData, beta: Mapping[str, float], M: float) -> _Built:
    pb = ProblemBuilder("separation")
    b = {a: pb.add_binary(f"b[{a}]") for a in case.areas}
    chi = {}
    for e in case.links:
        x = pb.add_var(f"chi[{e.id}]", 0.0, 1.0)
        c0 = float(case.existing_chi[e.id])
        for a in (e.sending_area, e.receiving_area):
            # outside the coalition chi stays at its existing value
            pb.add_constr(x - c0 * (1.0 - b[a]), ">=", 0.0, f"chilo[{e.id},{a}]")
            pb.add_constr(x - c0 * (1.0 - b[a]) - b[a], "<=", 0.0, f"chihi[{e.id},{a}]")
        chi[e.id] = LinExpr.of(x)
    # coalitions of fewer than two areas have zero value by definition
    pb.add_constr(lsum(b.values()), ">=", 2.0, "min_size")
    res = emit_kkt_reserve(pb, case, chi, M)
    da = emit_kkt_day_ahead(pb, case, chi, res, M)
    tie_areas = {
        lid: (e.sending_area, e.receiving_area)
        for e in case.links
        if case.existing_chi[e.id] <= 0.0
        for lid in e.lines
    }

    def fix_rows(pb, ln, f, fhat, sfx):
        if ln.id in tie_areas:
            big = 2.0 * ln.capacity
            for a in tie_areas[ln.id]:
                pb.add_constr(f - fhat - big * b[a], "<=", 0.0, f"devu[{ln.id},{a}]{sfx}")
                pb.add_constr(fhat - f - big * b[a], "<=", 0.0, f"devl[{ln.id},{a}]{sfx}")

    bal = {s.id: _balancing_block(pb, case, s, res, da, fix_rows) for s in case.scenarios}
    obj = res.primal["cost"] + da.primal["cost"] + lsum(beta[a] * b[a] for a in case.areas)
    for s in case.scenarios:
        obj = obj + s.probability * bal[s.id]
    pb.set_objective(obj)
    return _Built(pb, chi, res, da, bal, b)


# -- solving ---------------------------------------------------------------------------


def _residual(sol: Solution, blocks: Iterable[KktBlock]) -> float:
    worst = 0.0
    for blk in blocks:
        for p in blk.pairs:
            s = max(sol.value(p.slack), 0.0)
            d = max(sol.value(p.dual), 0.0)
            worst = max(worst, min(s, d) if s * d > 0 else 0.0)
    return worst


def _bound_hits(sol: Solution, blocks: Iterable[KktBlock], tol: float = 1e-6) -> list[str]:
    hits = []
    for blk in blocks:
        for p in blk.pairs:
            if sol.value(p.dual) >= p.dual_bound * (1 - tol) and p.dual_bound > 0:
                hits.append(p.name)
        for name, v, bound in blk.bounded_free:
            if abs(sol.value(v)) >= bound * (1 - tol):
                hits.append(name)
    return hits


def _solve_with_escalation(case, cfg: PreemptiveConfig, build: Callable[[float], _Built], label: str):
    """Solve, growing the dual bounds while any of them is active.

    A bound that stays active although raising it leaves the optimum
    unchanged only cuts a ray of equivalent duals and is accepted.
    """
    M = cfg.initial_dual_bound(case)
    prev = None
    for attempt in range(cfg.max_retries + 1):
        built = build(M)
        if cfg.lp_dump:
            built.pb.write_lp(f"{cfg.lp_dump}{label}_M{int(M)}.lp")
        sol = solve_milp(built.pb, cfg.rel_gap, cfg.backend, cfg.milp_time_limit)
        if sol.status is Status.INFEASIBLE:
            prev_obj = None
        elif not sol.ok:
            raise SolverFailure(f"{label}: MILP status {sol.status.value}")
        else:
            prev_obj = sol.objective
            hits = _bound_hits(sol, (built.res, built.da))
            if not hits:
                return built, sol, M
            if prev is not None and math.isclose(prev, sol.objective, rel_tol=1e-9, abs_tol=1e-6):
                log.info("%s: dual bound active on %s but optimum stable; accepted", label, hits[:3])
                return built, sol, M
            log.info("%s: dual bound %.3g active on %d pairs, escalating", label, M, len(hits))
        prev = prev_obj
        M *= 10.0
    if sol.status is Status.INFEASIBLE:
        raise SolverFailure(f"{label}: MILP infeasible for every big-M tried")
    raise BigMViolation(f"{label}: complementarity duals still at their bounds after {cfg.max_retries} retries")


def _stage_values(built: _Built, sol: Solution, case: CaseData):
    rc = sol.value(built.res.primal["cost"])
    dc = sol.value(built.da.primal["cost"])
    bc = {sid: sol.value(e) for sid, e in built.bal_costs.items()}
    chi = {e.id: float(sol.value(LinExpr.of(built.chi[e.id]))) for e in case.links}
    chi = {k: (0.0 if abs(v) < 1e-9 else v) for k, v in chi.items()}
    return rc, dc, bc, chi


def _from_outcome(coalition, out: SequentialOutcome) -> PreemptiveSolution:
    return PreemptiveSolution(
        coalition=frozenset(coalition),
        chi=dict(out.chi),
        cost=out.expected_cost,
        reserve_cost=out.reserve.cost,
        day_ahead_cost=out.day_ahead.cost,
        balancing_costs={k: b.cost for k, b in out.balancing.items()},
        scenario_costs=dict(out.scenario_costs),
        mip_gap=0.0,
        residual=0.0,
        dual_bound=0.0,
        from_sequential=True,
    )


def solve_preemptive(case: CaseData, coalition: Iterable[str] = (), config: PreemptiveConfig | None = None) -> PreemptiveSolution:
    """Minimum expected cost J(C) when coalition C may re-allocate its shared links."""
    cfg = config or PreemptiveConfig()
    coalition = frozenset(coalition)
    unknown = coalition - set(case.areas)
    if unknown:
        raise ValueError(f"unknown areas {sorted(unknown)}")
    if len(coalition) <= 1:
        return _from_outcome(coalition, run_sequential(case, None, coalition, cfg.backend, cfg.threads))
    label = "J" + "".join(sorted(coalition))
    built, sol, M = _solve_with_escalation(case, cfg, lambda m: build_preemptive(case, coalition, m), label)
    rc, dc, bc, chi = _stage_values(built, sol, case)
    resid = _residual(sol, (built.res, built.da))
    scale = max(1.0, abs(sol.objective))
    if resid > cfg.comp_tol * scale:
        raise BigMViolation(f"{label}: complementarity residual {resid:.3g} exceeds tolerance")
    viol = max_violation(built.pb, sol.x)
    if viol > 1e-5 * scale:
        log.warning("%s: MILP point violates rows by %.3g", label, viol)
    return PreemptiveSolution(
        coalition=coalition,
        chi=chi,
        cost=sol.objective,
        reserve_cost=rc,
        day_ahead_cost=dc,
        balancing_costs=bc,
        scenario_costs={sid: rc + dc + v for sid, v in bc.items()},
        mip_gap=sol.mip_gap,
        residual=resid,
        dual_bound=M,
        status=sol.status,
        primal=sol.values(),
    )


@dataclass
class ConsistencyReport:
    reserve_embedded: float
    reserve_lp: float
    day_ahead_embedded: float
    day_ahead_lp: float
    ok: bool
    worst_stage: str
    worst_gap: float


def verify_bilevel_consistency(
    case: CaseData, solution: PreemptiveSolution, rel_tol: float = 1e-6, raise_on_failure: bool = True, backend=None
) -> ConsistencyReport:
    """Re-clear the lower-level LPs at the solution's chi and compare objectives."""
    res = clear_reserve(case, solution.chi, backend=backend)
    if solution.from_sequential or not solution.primal:
        da = clear_day_ahead(case, solution.chi, res, backend=backend)
        emb_res, emb_da = res.cost, da.cost
        # for the day-ahead, compare with the reserve quantities the solution used
    else:
        emb_res, emb_da = solution.reserve_cost, solution.day_ahead_cost
        # day-ahead is parametrized by the embedded reserve schedule, not the re-cleared one
        from .markets import ReserveSolution

        x = solution.primal
        emb = ReserveSolution(
            chi=dict(solution.chi),
            up={g.id: x.get(f"r+[{g.id}]", 0.0) for g in case.generators},
            down={g.id: x.get(f"r-[{g.id}]", 0.0) for g in case.generators},
            link_up={}, link_down={}, price_up={}, price_down={}, cost=emb_res,
        )
        da = clear_day_ahead(case, solution.chi, emb, backend=backend)
    gaps = {
        "reserve": abs(res.cost - emb_res) / max(1.0, abs(res.cost)),
        "day_ahead": abs(da.cost - emb_da) / max(1.0, abs(da.cost)),
    }
    worst = max(gaps, key=gaps.get)
    report = ConsistencyReport(emb_res, res.cost, emb_da, da.cost, gaps[worst] <= rel_tol, worst, gaps[worst])
    if not report.ok and raise_on_failure:
        raise ConsistencyFailure(f"{worst} stage differs by {gaps[worst]:.3g} (relative)", report)
    return report


def solve_separation(
    case: CaseData,
    beta: Mapping[str, float],
    j_empty: float,
    config: PreemptiveConfig | None = None,
) -> SeparationSolution:
    """Coalition maximizing v(C) - sum(beta over C), over all C with at least two areas.

    The empty coalition (violation 0) is returned when nothing does better.
    """
    cfg = config or PreemptiveConfig()
    beta = {a: float(beta.get(a, 0.0)) for a in case.areas}
    if any(v < -1e-9 for v in beta.values()):
        raise ValueError("benefits must be nonnegative")
    built, sol, M = _solve_with_escalation(case, cfg, lambda m: build_separation(case, beta, m), "separation")
    rc, dc, bc, chi = _stage_values(built, sol, case)
    sel = {a: int(round(sol.value(v))) for a, v in built.select.items()}
    members = frozenset(a for a, k in sel.items() if k)
    paid = sum(beta[a] for a in members)
    jbar = sol.objective
    value = j_empty - (jbar - paid)
    violation = value - paid
    if violation <= 0.0:
        return SeparationSolution({a: 0 for a in case.areas}, frozenset(), jbar, 0.0, 0.0, chi, {})
    return SeparationSolution(sel, members, jbar, violation, value, chi, {sid: rc + dc + v for sid, v in bc.items()})


# -- value cache -----------------------------------------------------------------------


class ValueCache:
    """Thread-safe store of coalition solutions keyed by bitmask."""

    def __init__(self, case: CaseData, config: PreemptiveConfig | None = None):
        self.case = case
        self.config = config or PreemptiveConfig()
        self._lock = threading.Lock()
        self._store: dict[int, PreemptiveSolution] = {}
        self._pending: dict[int, threading.Event] = {}

    def __contains__(self, coalition) -> bool:
        with self._lock:
            return self._key(coalition) in self._store

    def _key(self, coalition) -> int:
        return coalition if isinstance(coalition, int) else coalition_mask(self.case, coalition)

    def put(self, sol: PreemptiveSolution) -> None:
        with self._lock:
            self._store[coalition_mask(self.case, sol.coalition)] = sol

    def get(self, coalition) -> PreemptiveSolution:
        key = self._key(coalition)
        while True:
            with self._lock:
                if key in self._store:
                    return self._store[key]
                ev = self._pending.get(key)
                if ev is None:
                    ev = self._pending[key] = threading.Event()
                    owner = True
                else:
                    owner = False
            if not owner:
                ev.wait()
                continue
            try:
                sol = solve_preemptive(self.case, mask_coalition(self.case, key), self.config)
                with self._lock:
                    self._store[key] = sol
                return sol
            finally:
                with self._lock:
                    self._pending.pop(key, None)
                ev.set()

    def cost(self, coalition) -> float:
        return self.get(coalition).cost

    def empty(self) -> PreemptiveSolution:
        return self.get(0)

    def fill(self, masks: Iterable[int] | None = None, threads: int | None = None) -> None:
        n = len(self.case.areas)
        masks = list(range(1 << n)) if masks is None else list(masks)
        threads = threads or self.config.threads
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(threads) as ex:
                list(ex.map(self.get, masks))
        else:
            for m in masks:
                self.get(m)

    def known(self) -> dict[int, PreemptiveSolution]:
        with self._lock:
            return dict(self._store)


def all_coalitions(case: CaseData):
    for k in range(len(case.areas) + 1):
        for combo in itertools.combinations(case.areas, k):
            yield frozenset(combo)

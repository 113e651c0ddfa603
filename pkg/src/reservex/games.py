"""Coalitional values, allocation mechanisms and core diagnostics.

Values are cost reductions relative to the uncoordinated sequential market:
``v(C) = J(empty) - J(C)`` in expectation or per scenario.  Coalitions are
frozensets of area ids; tables are plain dicts with a completeness flag.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import qp
from .errors import DegenerateStage, IncompleteTable, IterationLimit, ZeroGrandValue
from .markets import run_sequential
from .model import CaseData
from .preemptive import PreemptiveConfig, ValueCache, solve_separation
from .solver import INF, ProblemBuilder, Status, lsum, solve_lp

log = logging.getLogger(__name__)

CG_TOL = 1e-4
MAX_ITER = 50


@dataclass
class CoalitionValueTable:
    areas: tuple[str, ...]
    values: dict[frozenset, float]
    kind: str = "expected"  # or a scenario id

    def __getitem__(self, coalition) -> float:
        c = frozenset(coalition)
        if len(c) <= 1:
            return 0.0
        try:
            return self.values[c]
        except KeyError:
            raise IncompleteTable(f"no value for coalition {sorted(c)}") from None

    def __contains__(self, coalition) -> bool:
        return len(frozenset(coalition)) <= 1 or frozenset(coalition) in self.values

    @property
    def grand(self) -> float:
        return self[self.areas]

    @property
    def complete(self) -> bool:
        return all(c in self for c in subsets(self.areas))

    def require_complete(self) -> None:
        missing = [sorted(c) for c in subsets(self.areas) if c not in self]
        if missing:
            raise IncompleteTable(f"{len(missing)} coalition values missing, e.g. {missing[0]}")

    @classmethod
    def from_function(cls, areas: Sequence[str], fn: Callable[[frozenset], float], kind="expected"):
        vals = {c: float(fn(c)) for c in subsets(areas) if len(c) >= 2}
        return cls(tuple(areas), vals, kind)


@dataclass
class BenefitAllocation:
    beta: dict[str, float]
    mechanism: str
    epsilon: float | None = None
    criterion: str | None = None
    iterations: int = 0
    log: list[dict] = field(default_factory=list)

    def total(self) -> float:
        return sum(self.beta.values())

    def vector(self, areas: Sequence[str]) -> np.ndarray:
        return np.array([self.beta[a] for a in areas])


def subsets(areas: Sequence[str], proper: bool = False, nonempty: bool = False):
    n = len(areas)
    for k in range(1 if nonempty else 0, n if proper else n + 1):
        for combo in itertools.combinations(areas, k):
            yield frozenset(combo)


# -- value tables ---------------------------------------------------------------


def value_expected(cache: ValueCache, coalition) -> float:
    c = frozenset(coalition)
    if len(c) <= 1:
        return 0.0
    return cache.empty().cost - cache.get(c).cost


def value_scenario(cache: ValueCache, coalition, scenario: str, reclear: bool = True) -> float:
    """Scenario cost reduction of a coalition.

    With ``reclear`` the sequential market is cleared again at the
    coalition's optimal allocation; otherwise the MILP's embedded stage costs
    are used.  A re-clear whose expected cost misses J(C) has landed on a
    different optimum of a degenerate lower level; the embedded costs are
    used then so that expected and scenario values stay consistent.
    """
    c = frozenset(coalition)
    if len(c) <= 1:
        return 0.0
    base = cache.empty().scenario_costs[scenario]
    sol = cache.get(c)
    if reclear and not sol.from_sequential:
        out = run_sequential(cache.case, sol.chi, c, cache.config.backend)
        if math.isclose(out.expected_cost, sol.cost, rel_tol=1e-6, abs_tol=1e-6):
            return base - out.scenario_costs[scenario]
        log.warning(
            "re-clear of %s costs %.2f, not %.2f; using embedded stage costs", sorted(c), out.expected_cost, sol.cost
        )
    return base - sol.scenario_costs[scenario]


def expected_table(cache: ValueCache, threads: int | None = None) -> CoalitionValueTable:
    areas = cache.case.areas
    masks = [m for m in range(1 << len(areas)) if bin(m).count("1") >= 2 or m == 0]
    cache.fill(masks, threads)
    return CoalitionValueTable.from_function(areas, lambda c: value_expected(cache, c))


def scenario_tables(cache: ValueCache, reclear: bool = True, threads: int | None = None) -> dict[str, CoalitionValueTable]:
    case = cache.case
    areas = case.areas
    masks = [m for m in range(1 << len(areas)) if bin(m).count("1") >= 2 or m == 0]
    cache.fill(masks, threads)
    out = {}
    for s in case.scenarios:
        out[s.id] = CoalitionValueTable.from_function(areas, lambda c, sid=s.id: value_scenario(cache, c, sid, reclear), s.id)
    return out


# -- classic solutions -------------------------------------------------------------


def shapley(table: CoalitionValueTable) -> BenefitAllocation:
    table.require_complete()
    areas = table.areas
    n = len(areas)
    beta = {}
    for a in areas:
        others = [b for b in areas if b != a]
        tot = 0.0
        for k in range(n):
            w = math.factorial(k) * math.factorial(n - k - 1) / math.factorial(n)
            for combo in itertools.combinations(others, k):
                c = frozenset(combo)
                tot += w * (table[c | {a}] - table[c])
        beta[a] = tot
    return BenefitAllocation(beta, "shapley")


def marginal_contribution(table: CoalitionValueTable) -> BenefitAllocation:
    grand = frozenset(table.areas)
    return BenefitAllocation({a: table[grand] - table[grand - {a}] for a in table.areas}, "marginal")


def equal_shares(table: CoalitionValueTable) -> BenefitAllocation:
    share = table.grand / len(table.areas)
    return BenefitAllocation({a: share for a in table.areas}, "equal")


def excess(table: CoalitionValueTable, beta: Mapping[str, float], coalition) -> float:
    c = frozenset(coalition)
    return table[c] - sum(beta[a] for a in c)


def max_excess(table: CoalitionValueTable, beta: Mapping[str, float]) -> tuple[float, frozenset]:
    """Largest stability violation over nonempty proper coalitions."""
    table.require_complete()
    best, arg = -INF, frozenset()
    for c in subsets(table.areas, proper=True, nonempty=True):
        e = excess(table, beta, c)
        if e > best + 1e-12:
            best, arg = e, c
    return best, arg


def nucleolus(table: CoalitionValueTable, tol: float = 1e-7) -> BenefitAllocation:
    """Prenucleolus over efficient allocations by sequential LPs.

    Each stage minimizes the largest excess among coalitions not yet fixed.
    Coalitions binding with positive dual are fixed at that level; those whose
    indicator vector is spanned by fixed ones (plus the grand coalition) drop
    out.  Stops when the fixed set spans the whole allocation space.
    """
    table.require_complete()
    areas = table.areas
    n = len(areas)
    idx = {a: k for k, a in enumerate(areas)}

    def vec(c):
        v = np.zeros(n)
        for a in c:
            v[idx[a]] = 1.0
        return v

    free = [c for c in subsets(areas, proper=True, nonempty=True)]
    fixed: list[tuple[frozenset, float]] = []
    span = [np.ones(n)]
    levels = []
    beta = None
    for stage in range(2 ** n):
        if np.linalg.matrix_rank(np.vstack(span)) >= n or not free:
            break
        pb = ProblemBuilder(f"nucleolus[{stage}]")
        b = {a: pb.add_var(f"b[{a}]", -INF, INF) for a in areas}
        eps = pb.add_var("eps", -INF, INF)
        pb.add_constr(lsum(b.values()), "==", table.grand, "eff")
        for c, lev in fixed:
            pb.add_constr(lsum(b[a] for a in c), "==", table[c] - lev, f"fix{sorted(c)}")
        rows = {}
        for k, c in enumerate(free):
            name = f"ex{k}"
            pb.add_constr(lsum(b[a] for a in c) + eps, ">=", table[c], name)
            rows[name] = c
        pb.set_objective(eps)
        sol = solve_lp(pb)
        if sol.status is not Status.OPTIMAL:
            raise DegenerateStage(f"nucleolus stage {stage}: LP status {sol.status.value}")
        level = sol.value(eps)
        levels.append(level)
        beta = {a: sol.value(b[a]) for a in areas}
        binding = [rows[nm] for nm in rows if sol.dual(nm) > tol]
        if not binding:
            # dual degenerate: fall back to primal tightness and verify one by one
            binding = [c for c in free if abs(excess(table, beta, c) - level) <= 1e-7 * max(1.0, abs(level))]
            binding = [c for c in binding if _fixed_level_forced(table, areas, fixed, free, c, level)]
        if not binding:
            raise DegenerateStage(f"nucleolus stage {stage}: no coalition could be fixed (level {level:.6g})")
        for c in binding:
            fixed.append((c, level))
            span.append(vec(c))
        S = np.vstack(span)
        r = np.linalg.matrix_rank(S)
        free = [c for c in free if c not in {f for f, _ in fixed} and np.linalg.matrix_rank(np.vstack([S, vec(c)])) > r]
    if beta is None:
        beta = {a: table.grand / n for a in areas}
    return BenefitAllocation(beta, "nucleolus", epsilon=levels[0] if levels else None, log=[{"level": x} for x in levels])


def _fixed_level_forced(table, areas, fixed, free, c, level) -> bool:
    """Check that coalition c cannot go below ``level`` while others stay at or below it."""
    pb = ProblemBuilder("nucleolus_check")
    b = {a: pb.add_var(f"b[{a}]", -INF, INF) for a in areas}
    pb.add_constr(lsum(b.values()), "==", table.grand, "eff")
    for f, lev in fixed:
        pb.add_constr(lsum(b[a] for a in f), "==", table[f] - lev, f"fix{sorted(f)}")
    for k, d in enumerate(free):
        pb.add_constr(lsum(b[a] for a in d), ">=", table[d] - level, f"ex{k}")
    pb.set_objective(lsum(b[a] for a in c), "max")
    sol = solve_lp(pb)
    return sol.ok and sol.objective <= table[c] - level + 1e-7 * max(1.0, abs(level))


# -- least-core selecting mechanism ---------------------------------------------------


def master_lp(areas: Sequence[str], grand: float, family: Mapping[frozenset, float]) -> tuple[float, dict[str, float]]:
    """Smallest epsilon >= 0 admitting an efficient, nonnegative allocation."""
    pb = ProblemBuilder("least_core_master")
    b = {a: pb.add_var(f"b[{a}]", 0.0, INF) for a in areas}
    eps = pb.add_var("eps", 0.0, INF)
    pb.add_constr(lsum(b.values()), "==", grand, "eff")
    for k, (c, v) in enumerate(sorted(family.items(), key=lambda kv: sorted(kv[0]))):
        pb.add_constr(lsum(b[a] for a in c) + eps, ">=", v, f"st{k}")
    pb.set_objective(eps)
    sol = solve_lp(pb)
    if sol.status is not Status.OPTIMAL:
        raise ZeroGrandValue("master LP infeasible; the grand coalition value must be nonnegative")
    return max(sol.value(eps), 0.0), {a: sol.value(b[a]) for a in areas}


def tie_break(
    areas: Sequence[str],
    grand: float,
    family: Mapping[frozenset, float],
    eps: float,
    target: Mapping[str, float],
    start: Mapping[str, float],
) -> dict[str, float]:
    """Closest point to ``target`` in the epsilon-core restricted to ``family``."""
    n = len(areas)
    idx = {a: k for k, a in enumerate(areas)}
    G, h = [], []
    for c, v in family.items():
        row = np.zeros(n)
        for a in c:
            row[idx[a]] = 1.0
        G.append(row)
        h.append(v - eps)
    G += list(np.eye(n))
    h += [0.0] * n
    x0 = np.array([start[a] for a in areas])
    x0 = np.maximum(x0, 0.0)
    x = qp.project(
        np.array([target[a] for a in areas]),
        np.ones((1, n)),
        [grand],
        np.array(G),
        np.array(h),
        x0,
    )
    return {a: float(x[idx[a]]) for a in areas}


def least_core_brute_force(table: CoalitionValueTable, target: Mapping[str, float]) -> BenefitAllocation:
    """Master LP and tie-break over the fully enumerated table."""
    table.require_complete()
    fam = {c: table[c] for c in subsets(table.areas, proper=True, nonempty=True)}
    eps, start = master_lp(table.areas, table.grand, fam)
    beta = tie_break(table.areas, table.grand, fam, eps, target, start)
    return BenefitAllocation(beta, "least-core", epsilon=eps, criterion="custom")


def table_oracle(table: CoalitionValueTable):
    """Separation by enumeration: most violated coalition with at least two areas."""

    def oracle(beta):
        best, arg = 0.0, frozenset()
        for c in subsets(table.areas):
            if len(c) < 2:
                continue
            e = table[c] - sum(beta[a] for a in c)
            if e > best:
                best, arg = e, c
        return arg, best, (table[arg] if arg else 0.0)

    return oracle


def milp_oracle(cache: ValueCache):
    """Separation through the coalition-selection MILP."""
    j_empty = cache.empty().cost

    def oracle(beta):
        sep = solve_separation(cache.case, beta, j_empty, cache.config)
        return sep.coalition, sep.violation, sep.value

    return oracle


def least_core_select(
    areas: Sequence[str],
    grand: float,
    target: Mapping[str, float],
    oracle: Callable,
    criterion: str = "custom",
    initial: Mapping[frozenset, float] | None = None,
    cg_tol: float = CG_TOL,
    max_iter: int = MAX_ITER,
) -> BenefitAllocation:
    """Constraint generation for the least-core point closest to ``target``.

    ``oracle(beta)`` returns (coalition, violation, value) for the most
    violated coalition.  Iterates master LP, tie-break projection and
    separation until the violation found does not exceed the master's
    epsilon by more than ``cg_tol``.
    """
    if grand < 0:
        raise ZeroGrandValue("grand-coalition value is negative")
    family = dict(initial or {})
    history = []
    beta = None
    eps = 0.0
    for k in range(1, max_iter + 1):
        eps, start = master_lp(areas, grand, family)
        beta = tie_break(areas, grand, family, eps, target, start)
        coal, eta, value = oracle(beta)
        history.append(
            {
                "iteration": k,
                "epsilon": eps,
                "eta": eta,
                "coalition": sorted(coal),
                "value": value,
                "beta": dict(beta),
            }
        )
        log.info("least-core iteration %d: eps=%.6f eta=%.6f C=%s", k, eps, eta, sorted(coal))
        if eta <= eps + cg_tol:
            return BenefitAllocation(beta, "least-core", eps, criterion, k, history)
        family[frozenset(coal)] = value
    raise IterationLimit(f"least-core selection not converged after {max_iter} iterations", beta, history[-1]["eta"] - eps)


def run_log_json(alloc: BenefitAllocation) -> str:
    return json.dumps(
        {
            "mechanism": alloc.mechanism,
            "criterion": alloc.criterion,
            "epsilon": alloc.epsilon,
            "iterations": alloc.iterations,
            "beta": alloc.beta,
            "log": alloc.log,
        },
        indent=1,
        sort_keys=True,
    )


# -- scenario split ----------------------------------------------------------------


def scenario_allocation(
    alloc: BenefitAllocation, grand_expected: float, grand_scenario: float, scenario: str = "", in_sample: bool = True
) -> BenefitAllocation:
    """Scale expected benefits to one scenario's cost reduction, keeping the shares.

    Works for realizations outside the scenario set too, but then only
    efficiency is guaranteed.
    """
    if abs(grand_expected) <= 1e-12:
        raise ZeroGrandValue("expected grand-coalition value is zero; shares are undefined")
    if not in_sample:
        log.warning("scenario %r is out of sample; only efficiency of the split is guaranteed", scenario)
    beta = {a: b / grand_expected * grand_scenario for a, b in alloc.beta.items()}
    return BenefitAllocation(beta, alloc.mechanism + "/scenario", alloc.epsilon, alloc.criterion, alloc.iterations)


# -- diagnostics ----------------------------------------------------------------------


@dataclass
class Diagnostics:
    veto_areas: list[str]
    core_nonempty_certificate: bool
    empty_core_certificates: list[tuple[list[str], float, float]]
    supermodularity_violations: list[dict]
    max_excess: float | None = None
    max_excess_coalition: list[str] | None = None
    in_core: bool | None = None
    dummy_areas: list[str] = field(default_factory=list)
    dummy_violations: list[str] = field(default_factory=list)


def diagnostics(table: CoalitionValueTable, beta: Mapping[str, float] | None = None, tol: float = 1e-6) -> Diagnostics:
    table.require_complete()
    areas = table.areas
    grand = frozenset(areas)
    veto = [a for a in areas if abs(table[grand - {a}]) <= tol]
    cert = [
        (sorted(c), table[c], table.grand)
        for c in subsets(areas, proper=True, nonempty=True)
        if table[c] > table.grand + tol
    ]
    sm = []
    for a in areas:
        rest = [b for b in areas if b != a]
        for big in subsets(rest):
            for small in subsets(sorted(big)):
                lhs = table[big | {a}] - table[big]
                rhs = table[small | {a}] - table[small]
                if lhs < rhs - tol:
                    sm.append({"area": a, "larger": sorted(big), "smaller": sorted(small), "gain_larger": lhs, "gain_smaller": rhs})
    dummies = [a for a in areas if abs(table.grand - table[grand - {a}]) <= tol]
    out = Diagnostics(veto, bool(veto), cert, sm, dummy_areas=dummies)
    if beta is not None:
        e, c = max_excess(table, beta)
        out.max_excess = e
        out.max_excess_coalition = sorted(c)
        efficient = abs(sum(beta.values()) - table.grand) <= tol * max(1.0, abs(table.grand))
        out.in_core = efficient and e <= tol * max(1.0, abs(table.grand))
        if out.in_core:
            out.dummy_violations = [a for a in dummies if beta[a] > tol]
    return out

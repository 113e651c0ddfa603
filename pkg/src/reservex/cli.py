"""Command-line interface.

    reservex validate CASE
    reservex clear CASE [--chi 0,0.06] [--coalition a1,a2]
    reservex preempt CASE [--coalition ALL] [--sweep]
    reservex values CASE [--embedded]
    reservex allocate CASE --method least-core --criterion marginal [--scenario s1]
    reservex report CASE

CASE is a JSON file or the name of a bundled fixture (``base``,
``emptycore``, ``two_area`` ...).  Solver backend: ``RESERVEX_SOLVER`` env
var (``highs`` or ``scipy``) or ``--backend``.

Exit codes: 0 success, 1 solver failure or failed check, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, games
from .errors import IterationLimit, ParseError, ReservexError, ValidationError
from .markets import (
    allocation_table,
    budget_residuals,
    cost_table,
    decompose_surpluses,
    dispatch_table,
    rows_to_csv,
    run_sequential,
)
from .model import CaseData, coalition_label, load_case, parse_coalition
from .preemptive import PreemptiveConfig, ValueCache, solve_preemptive, verify_bilevel_consistency

log = logging.getLogger("reservex")

METHODS = ("shapley", "nucleolus", "least-core", "marginal", "equal")
BUDGET_TOL = 1e-6


class CheckFailed(ReservexError):
    """An output invariant did not hold."""


@dataclass
class RunConfig:
    command: str
    case: str
    coalition: str | None = None
    chi: str | None = None
    method: str = "least-core"
    criterion: str = "marginal"
    scenario: str | None = None
    oracle: str = "milp"
    init: str = "empty"
    embedded: bool = False
    sweep: bool = False
    sweep_points: int = 21
    link: str | None = None
    out: str | None = None
    digits: int = 4
    timestamp: bool = False
    threads: int = 1
    solver: PreemptiveConfig = field(default_factory=PreemptiveConfig)

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        solver = PreemptiveConfig(
            rel_gap=ns.rel_gap,
            comp_tol=ns.comp_tol,
            big_m=ns.big_m,
            milp_time_limit=ns.milp_time_limit,
            backend=ns.backend,
            threads=ns.threads,
            lp_dump=ns.lp_dump,
        )
        keys = cls.__dataclass_fields__.keys() - {"solver"}
        return cls(**{k: getattr(ns, k) for k in keys if hasattr(ns, k)}, solver=solver)


# -- output helpers ----------------------------------------------------------------


class Output:
    """Writes CSV/JSON files into the output directory (if any) and echoes tables."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.out) if cfg.out else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def _header(self) -> str:
        if not self.cfg.timestamp:
            return ""
        return f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S')}\n"

    def table(self, name: str, rows: list[dict], echo: bool = True) -> str:
        text = rows_to_csv(rows, digits=self.cfg.digits)
        if self.dir:
            path = self.dir / f"{name}.csv"
            path.write_text(self._header() + text, encoding="utf-8")
            self.written.append(path)
        if echo:
            print(f"# {name}")
            print(text, end="")
        return text

    def json(self, name: str, text: str) -> None:
        if self.dir:
            path = self.dir / f"{name}.json"
            path.write_text(text + "\n", encoding="utf-8")
            self.written.append(path)


def _dumps(obj) -> str:
    return json.dumps(_plain(obj), indent=1, sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set, frozenset)):
        items = [_plain(v) for v in obj]
        return sorted(items) if isinstance(obj, (set, frozenset)) else items
    if isinstance(obj, float):
        return round(obj, 6) + 0.0
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    return obj


def _chi_arg(case: CaseData, text: str | None) -> dict[str, float]:
    if text is None:
        return case.chi_vector()
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"--chi expects comma-separated numbers, got {text!r}", "chi") from None
    return case.chi_vector(vals)


def _check_budget(case: CaseData, alloc) -> None:
    res = budget_residuals(case, alloc)
    worst = max((abs(v) for v in res.values()), default=0.0)
    if worst > BUDGET_TOL * max(1.0, max(abs(c) for per in alloc.floor_costs.values() for c in per.values())):
        raise CheckFailed(f"budget balance violated by {worst:.3g} EUR")


# -- commands ----------------------------------------------------------------------


def cmd_validate(cfg: RunConfig, case: CaseData, out: Output) -> int:
    rr = case.requirements()
    print(f"case {case.name}: {len(case.areas)} areas, {len(case.nodes)} nodes, {len(case.lines)} lines, "
          f"{len(case.links)} links, {len(case.generators)} units, {len(case.wind_farms)} wind farms, "
          f"{len(case.scenarios)} scenarios")
    rows = [{"area": a, "req_up": rr.up[a], "req_down": rr.down[a]} for a in case.areas]
    out.table("requirements", rows)
    return 0


def cmd_clear(cfg: RunConfig, case: CaseData, out: Output) -> int:
    chi = _chi_arg(case, cfg.chi)
    if cfg.coalition is None:
        # a non-status-quo allocation implies the areas coordinate
        moved = any(abs(chi[k] - v) > 1e-12 for k, v in case.chi_vector().items())
        coalition = frozenset(case.areas) if moved else frozenset()
    else:
        coalition = parse_coalition(case, cfg.coalition)
    outcome = run_sequential(case, chi, coalition, cfg.solver.backend, cfg.threads)
    alloc = decompose_surpluses(case, outcome)
    _check_budget(case, alloc)
    print("chi: " + ", ".join(f"{k}={v:g}" for k, v in sorted(chi.items())) + f"; coalition {coalition_label(case, coalition)}")
    out.table("costs", cost_table(case, outcome))
    out.table("area_costs", allocation_table(case, alloc), echo=False)
    out.table("dispatch", dispatch_table(case, outcome), echo=False)
    if alloc.degenerate:
        log.warning("degenerate stages, surplus split not unique: %s", alloc.degenerate)
    return 0


def _sweep(cfg: RunConfig, case: CaseData, out: Output) -> int:
    link = cfg.link or case.link_ids_sorted[0]
    if link not in case.link_by_id:
        raise ValidationError(f"unknown link {link!r}", "link")
    base_chi = case.chi_vector()
    grid = np.linspace(0.0, 1.0, cfg.sweep_points)

    def run(x):
        chi = dict(base_chi)
        chi[link] = float(x)
        return run_sequential(case, chi, case.areas, cfg.solver.backend, cfg.threads)

    ref = run(1e-3).expected_cost
    rows = []
    for x in grid:
        o = run(x)
        rows.append(
            {
                "chi": float(x),
                "reserve": o.reserve.cost,
                "day_ahead": o.day_ahead.cost,
                "balancing": sum(s.probability * o.balancing[s.id].cost for s in case.scenarios),
                "expected": o.expected_cost,
                "normalized": o.expected_cost / ref,
            }
        )
    out.table("sweep", rows)
    best = min(rows, key=lambda r: r["expected"])
    print(f"minimum expected cost {best['expected']:.2f} at chi_{link} = {best['chi']:g}")
    return 0


def cmd_preempt(cfg: RunConfig, case: CaseData, out: Output) -> int:
    if cfg.sweep:
        return _sweep(cfg, case, out)
    coalition = parse_coalition(case, cfg.coalition if cfg.coalition is not None else "ALL")
    sol = solve_preemptive(case, coalition, cfg.solver)
    rep = verify_bilevel_consistency(case, sol, backend=cfg.solver.backend)
    label = coalition_label(case, coalition)
    print(f"J{label} = {sol.cost:.2f}")
    print("chi_hat: " + ", ".join(f"{k}={v:.6f}" for k, v in sorted(sol.chi.items())))
    rows = [
        {
            "scenario": sid,
            "reserve": sol.reserve_cost,
            "day_ahead": sol.day_ahead_cost,
            "balancing": sol.balancing_costs[sid],
            "total": sol.scenario_costs[sid],
        }
        for sid in sorted(sol.scenario_costs)
    ]
    rows.append({"scenario": "expected", "reserve": sol.reserve_cost, "day_ahead": sol.day_ahead_cost,
                 "balancing": sol.cost - sol.reserve_cost - sol.day_ahead_cost, "total": sol.cost})
    out.table("preemptive_costs", rows)
    out.table("chi", [{"link": k, "chi": v} for k, v in sorted(sol.chi.items())], echo=False)
    out.json("preemptive", _dumps({"coalition": sorted(coalition), "cost": sol.cost, "chi": sol.chi,
                                   "mip_gap": sol.mip_gap, "dual_bound": sol.dual_bound,
                                   "consistency": asdict(rep)}))
    return 0


def _value_rows(case: CaseData, cache: ValueCache, expected, per_scen) -> list[dict]:
    rows = []
    for c in games.subsets(case.areas):
        sol = cache.get(c)
        row = {"coalition": coalition_label(case, c), "J": sol.cost, "v": expected[c]}
        for sid, t in per_scen.items():
            row[f"v_{sid}"] = t[c]
        rows.append(row)
    return rows


def cmd_values(cfg: RunConfig, case: CaseData, out: Output) -> int:
    cache = ValueCache(case, cfg.solver)
    table = games.expected_table(cache, cfg.threads)
    per = games.scenario_tables(cache, reclear=not cfg.embedded, threads=cfg.threads)
    out.table("values", _value_rows(case, cache, table, per))
    return 0


def _target(table: games.CoalitionValueTable, criterion: str) -> games.BenefitAllocation:
    if criterion == "marginal":
        return games.marginal_contribution(table)
    if criterion == "equal":
        return games.equal_shares(table)
    raise ValidationError(f"unknown criterion {criterion!r}", "criterion")


def _partial_table(case: CaseData, cache: ValueCache) -> games.CoalitionValueTable:
    """Grand coalition and the coalitions missing one area; enough for the criteria."""
    grand = frozenset(case.areas)
    need = [grand] + [grand - {a} for a in case.areas]
    vals = {c: games.value_expected(cache, c) for c in need if len(c) >= 2}
    return games.CoalitionValueTable(tuple(case.areas), vals)


def _initial_family(case: CaseData, table: games.CoalitionValueTable, init: str) -> dict:
    if init == "empty":
        return {}
    grand = frozenset(case.areas)
    return {grand - {a}: table[grand - {a}] for a in case.areas if len(case.areas) > 2}


def _allocate(cfg: RunConfig, case: CaseData, cache: ValueCache, method: str, table=None):
    """Return (allocation, expected table used, grand value)."""
    if method == "least-core" and cfg.oracle == "milp" and table is None:
        part = _partial_table(case, cache)
        target = _target(part, cfg.criterion)
        alloc = games.least_core_select(case.areas, part.grand, target.beta, games.milp_oracle(cache), cfg.criterion,
                                        initial=_initial_family(case, part, cfg.init))
        return alloc, None, part.grand
    if table is None:
        table = games.expected_table(cache, cfg.threads)
    if method == "shapley":
        alloc = games.shapley(table)
    elif method == "nucleolus":
        alloc = games.nucleolus(table)
    elif method == "marginal":
        alloc = games.marginal_contribution(table)
    elif method == "equal":
        alloc = games.equal_shares(table)
    elif method == "least-core":
        target = _target(table, cfg.criterion)
        alloc = games.least_core_select(case.areas, table.grand, target.beta, games.table_oracle(table), cfg.criterion,
                                        initial=_initial_family(case, table, cfg.init))
    else:
        raise ValidationError(f"unknown method {method!r}", "method")
    return alloc, table, table.grand


def _check_efficient(alloc: games.BenefitAllocation, grand: float, what: str) -> None:
    if alloc.mechanism.startswith("marginal"):
        return  # not efficient by construction
    gap = abs(alloc.total() - grand)
    if gap > 1e-6 * max(1.0, abs(grand)):
        raise CheckFailed(f"{what}: allocation sums to {alloc.total():.6f}, grand value is {grand:.6f}")


def cmd_allocate(cfg: RunConfig, case: CaseData, out: Output) -> int:
    if cfg.scenario:
        case.scenario(cfg.scenario)  # fail before any solve
    cache = ValueCache(case, cfg.solver)
    alloc, table, grand = _allocate(cfg, case, cache, cfg.method)
    _check_efficient(alloc, grand, cfg.method)
    rows = [{"mechanism": cfg.method, "scenario": "expected", "area": a, "value": alloc.beta[a]} for a in case.areas]
    if cfg.scenario:
        sid = case.scenario(cfg.scenario).id
        gs = games.value_scenario(cache, case.areas, sid)
        sa = games.scenario_allocation(alloc, grand, gs, sid)
        rows += [{"mechanism": cfg.method, "scenario": sid, "area": a, "value": sa.beta[a]} for a in case.areas]
        _check_efficient(sa, gs, f"{cfg.method}/{sid}")
    out.table("allocation", rows)
    if alloc.mechanism == "least-core":
        print(f"epsilon = {alloc.epsilon:.4f} after {alloc.iterations} iterations")
    if table is not None:
        e, c = games.max_excess(table, alloc.beta)
        print(f"max excess = {round(e, 9) + 0.0:.4f} at {coalition_label(case, c)}")
    out.json("run_log", _dumps(json.loads(games.run_log_json(alloc))))
    return 0


def cmd_report(cfg: RunConfig, case: CaseData, out: Output) -> int:
    cache = ValueCache(case, cfg.solver)
    table = games.expected_table(cache, cfg.threads)
    per = games.scenario_tables(cache, reclear=not cfg.embedded, threads=cfg.threads)

    empty = run_sequential(case, None, (), cfg.solver.backend, cfg.threads)
    grand_sol = cache.get(case.areas)
    verify_bilevel_consistency(case, grand_sol, backend=cfg.solver.backend)
    coop = run_sequential(case, grand_sol.chi, case.areas, cfg.solver.backend, cfg.threads)
    rows = []
    for label, o in (("existing", empty), ("preemptive", coop)):
        for r in cost_table(case, o):
            rows.append({"market": label, **r})
    out.table("costs", rows)
    for label, o in (("existing", empty), ("preemptive", coop)):
        alloc = decompose_surpluses(case, o)
        _check_budget(case, alloc)
        out.table(f"area_costs_{label}", allocation_table(case, alloc), echo=False)
        out.table(f"dispatch_{label}", dispatch_table(case, o), echo=False)
    out.table("values", _value_rows(case, cache, table, per))

    tidy, excesses = [], []
    for method in METHODS:
        alloc, _, grand = _allocate(cfg, case, cache, method, table)
        _check_efficient(alloc, grand, method)
        tidy += [{"mechanism": method, "scenario": "expected", "area": a, "value": alloc.beta[a]} for a in case.areas]
        e, c = games.max_excess(table, alloc.beta)
        excesses.append({"mechanism": method, "max_excess": e, "coalition": coalition_label(case, c),
                         "epsilon": alloc.epsilon if alloc.epsilon is not None else ""})
        if method in ("shapley", "nucleolus", "least-core") and abs(table.grand) > 1e-9:
            for s in case.scenarios:
                sa = games.scenario_allocation(alloc, table.grand, per[s.id].grand, s.id)
                tidy += [{"mechanism": method, "scenario": s.id, "area": a, "value": sa.beta[a]} for a in case.areas]
    out.table("allocations", tidy)
    out.table("stability", excesses)
    diag = games.diagnostics(table)
    scen_diag = {sid: games.diagnostics(t) for sid, t in per.items()}
    out.json("diagnostics", _dumps({"expected": asdict(diag), "scenarios": {k: asdict(v) for k, v in scen_diag.items()}}))
    print(f"veto areas: {diag.veto_areas or 'none'}; supermodularity violations: {len(diag.supermodularity_violations)}")
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "clear": cmd_clear,
    "preempt": cmd_preempt,
    "values": cmd_values,
    "allocate": cmd_allocate,
    "report": cmd_report,
}


# -- argument parsing --------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("case", help="case JSON file or bundled fixture name")
    p.add_argument("--out", "-o", default=None, help="directory for CSV/JSON outputs (default: print only)")
    p.add_argument("--digits", type=int, default=4, help="decimals in CSV output (default: 4)")
    p.add_argument("--timestamp", action="store_true",
                   help="prepend a timestamp comment to CSV files (off by default so reruns are byte-identical)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for scenarios/coalitions (default: 1)")
    p.add_argument("--backend", choices=("highs", "scipy"), default=None,
                   help="solver backend (default: $RESERVEX_SOLVER or highs)")
    p.add_argument("--big-m", dest="big_m", type=float, default=None,
                   help="initial dual bound for complementarity (default: 10 x largest price)")
    p.add_argument("--rel-gap", dest="rel_gap", type=float, default=1e-6, help="MILP relative gap (default: 1e-6)")
    p.add_argument("--comp-tol", dest="comp_tol", type=float, default=1e-6,
                   help="complementarity residual tolerance, relative (default: 1e-6)")
    p.add_argument("--milp-time-limit", dest="milp_time_limit", type=float, default=None,
                   help="seconds per MILP (default: none)")
    p.add_argument("--lp-dump", dest="lp_dump", default=None, metavar="PREFIX",
                   help="write every built MILP as an LP file with this path prefix")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reservex", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="load a case and print reserve requirements")
    _common(p)

    p = sub.add_parser("clear", help="clear the sequential markets at a given allocation")
    _common(p)
    p.add_argument("--chi", default=None, help="comma-separated chi per link, ordered by link id (default: case value)")
    p.add_argument("--coalition", default=None,
                   help="areas whose shared links stay free in balancing: ids, ALL or NONE "
                   "(default: ALL when --chi differs from the case's existing allocation, else NONE)")

    p = sub.add_parser("preempt", help="solve the preemptive allocation for a coalition")
    _common(p)
    p.add_argument("--coalition", default=None, help="area ids, ALL or NONE (default: ALL)")
    p.add_argument("--sweep", action="store_true", help="tabulate expected cost against chi of one link instead")
    p.add_argument("--sweep-points", dest="sweep_points", type=int, default=21, help="grid size (default: 21)")
    p.add_argument("--link", default=None, help="link swept (default: first link id)")

    p = sub.add_parser("values", help="dump the coalition value table")
    _common(p)
    p.add_argument("--embedded", action="store_true",
                   help="scenario values from the MILP's own stage costs rather than a re-clear")

    p = sub.add_parser("allocate", help="split the grand-coalition benefit")
    _common(p)
    p.add_argument("--method", choices=METHODS, default="least-core", help="mechanism (default: least-core)")
    p.add_argument("--criterion", choices=("marginal", "equal"), default="marginal",
                   help="least-core tie-break target (default: marginal)")
    p.add_argument("--scenario", default=None, help="also report the split of this scenario's benefit")
    p.add_argument("--oracle", choices=("milp", "table"), default="milp",
                   help="least-core separation: MILP or full enumeration (default: milp)")
    p.add_argument("--init", choices=("empty", "marginal"), default="empty",
                   help="initial coalition family: none, or every coalition missing one area (default: empty)")

    p = sub.add_parser("report", help="write all tables for a case")
    _common(p)
    p.add_argument("--criterion", choices=("marginal", "equal"), default="marginal",
                   help="least-core tie-break target (default: marginal)")
    p.add_argument("--embedded", action="store_true", help="see `values --embedded`")
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cfg = RunConfig.from_args(ns)
    if cfg.command == "report":
        cfg.oracle = "table"
    try:
        case = load_case(cfg.case)
        out = Output(cfg)
        return COMMANDS[cfg.command](cfg, case, out)
    except (ParseError, ValidationError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except IterationLimit as exc:
        print(f"IterationLimit: {exc}", file=sys.stderr)
        return 1
    except ReservexError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

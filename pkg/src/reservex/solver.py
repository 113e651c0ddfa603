"""Backend-neutral LP/MILP construction and solution.

Problems are assembled with :class:`ProblemBuilder` from :class:`Var` and
:class:`LinExpr` objects and handed to a backend.  Two backends ship:

* ``highs`` -- the HiGHS solver through ``highspy`` (reference backend)
* ``scipy`` -- HiGHS through ``scipy.optimize.linprog`` / ``milp``

The backend is picked by the ``RESERVEX_SOLVER`` environment variable or by
passing ``backend=`` explicitly.

Dual values are reported as shadow prices, i.e. the derivative of the optimal
objective with respect to the constraint right-hand side.  For a minimization
this makes duals of binding ``>=`` rows nonnegative and of binding ``<=`` rows
nonpositive.
"""

from __future__ import annotations

import enum
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import SolverFailure

log = logging.getLogger(__name__)

INF = math.inf

PRIMAL_FEAS_TOL = 1e-8
DUAL_FEAS_TOL = 1e-8
MIP_REL_GAP = 1e-6
INTEGRALITY_TOL = 1e-6

_SENSES = ("<=", ">=", "==")


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    GAP_LIMIT = "GapLimit"


class LinExpr:
    """Sparse affine expression ``sum(coef * var) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: Mapping[int, float] | None = None, const: float = 0.0):
        self.terms: dict[int, float] = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def of(x) -> "LinExpr":
        if isinstance(x, LinExpr):
            return x
        if isinstance(x, Var):
            return LinExpr({x.index: 1.0})
        return LinExpr(const=float(x))

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def iadd(self, other, scale: float = 1.0) -> "LinExpr":
        """In-place ``self += scale * other``."""
        if isinstance(other, Var):
            self.terms[other.index] = self.terms.get(other.index, 0.0) + scale
        elif isinstance(other, LinExpr):
            for k, v in other.terms.items():
                self.terms[k] = self.terms.get(k, 0.0) + scale * v
            self.const += scale * other.const
        else:
            self.const += scale * float(other)
        return self

    def __add__(self, other):
        return self.copy().iadd(other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.copy().iadd(other, -1.0)

    def __rsub__(self, other):
        return (-self).iadd(other)

    def __neg__(self):
        return LinExpr({k: -v for k, v in self.terms.items()}, -self.const)

    def __mul__(self, c):
        c = float(c)
        return LinExpr({k: c * v for k, v in self.terms.items()}, c * self.const)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def __repr__(self):
        body = " + ".join(f"{v:g}*x{k}" for k, v in self.terms.items())
        return f"LinExpr({body or '0'} + {self.const:g})"


class Var:
    """Handle to a declared variable; arithmetic produces :class:`LinExpr`."""

    __slots__ = ("index", "name")

    def __init__(self, index: int, name: str):
        self.index = index
        self.name = name

    def _expr(self):
        return LinExpr({self.index: 1.0})

    def __add__(self, other):
        return self._expr().iadd(other)

    __radd__ = __add__

    def __sub__(self, other):
        return self._expr().iadd(other, -1.0)

    def __rsub__(self, other):
        return LinExpr.of(other) - self

    def __neg__(self):
        return LinExpr({self.index: -1.0})

    def __mul__(self, c):
        return LinExpr({self.index: float(c)})

    __rmul__ = __mul__

    def __repr__(self):
        return f"Var({self.name})"


def lsum(items: Iterable) -> LinExpr:
    """Sum of variables/expressions/numbers without quadratic copying."""
    out = LinExpr()
    for it in items:
        out.iadd(it)
    return out


@dataclass
class Constraint:
    name: str
    expr: LinExpr  # constant folded into rhs at add time
    sense: str
    rhs: float


class ProblemBuilder:
    """Mutable container of variables, linear rows and a linear objective."""

    def __init__(self, name: str = "problem"):
        self.name = name
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.integer: list[bool] = []
        self.constraints: list[Constraint] = []
        self._row_names: dict[str, int] = {}
        self._var_names: dict[str, int] = {}
        self.objective = LinExpr()
        self.sense = "min"

    # -- declaration -------------------------------------------------------
    def add_var(self, name: str, lb: float = 0.0, ub: float = INF, integer: bool = False) -> Var:
        if name in self._var_names:
            raise ValueError(f"duplicate variable name {name!r}")
        if lb > ub:
            raise ValueError(f"variable {name!r}: lb {lb} > ub {ub}")
        idx = len(self.names)
        self._var_names[name] = idx
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.integer.append(bool(integer))
        return Var(idx, name)

    def add_binary(self, name: str) -> Var:
        return self.add_var(name, 0.0, 1.0, integer=True)

    def add_constr(self, expr, sense: str, rhs=0.0, name: str | None = None) -> Constraint:
        if sense not in _SENSES:
            raise ValueError(f"unknown sense {sense!r}")
        lhs = LinExpr.of(expr) - LinExpr.of(rhs)
        name = name or f"c{len(self.constraints)}"
        if name in self._row_names:
            raise ValueError(f"duplicate constraint name {name!r}")
        n = len(self.names)
        for k in lhs.terms:
            if not 0 <= k < n:
                raise ValueError(f"constraint {name!r} references undeclared variable {k}")
        row = Constraint(name, LinExpr(lhs.terms), sense, -lhs.const)
        self._row_names[name] = len(self.constraints)
        self.constraints.append(row)
        return row

    def set_objective(self, expr, sense: str = "min") -> None:
        if sense not in ("min", "max"):
            raise ValueError(f"unknown objective sense {sense!r}")
        self.objective = LinExpr.of(expr).copy()
        self.sense = sense

    def var(self, name: str) -> Var:
        return Var(self._var_names[name], name)

    @property
    def num_vars(self) -> int:
        return len(self.names)

    @property
    def is_mip(self) -> bool:
        return any(self.integer)

    # -- assembly ----------------------------------------------------------
    def matrix(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for r, c in enumerate(self.constraints):
            for k, v in c.expr.terms.items():
                if v != 0.0:
                    rows.append(r)
                    cols.append(k)
                    vals.append(v)
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(self.constraints), self.num_vars))

    def row_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.empty(len(self.constraints))
        hi = np.empty(len(self.constraints))
        for r, c in enumerate(self.constraints):
            lo[r] = c.rhs if c.sense in (">=", "==") else -INF
            hi[r] = c.rhs if c.sense in ("<=", "==") else INF
        return lo, hi

    def cost_vector(self) -> np.ndarray:
        c = np.zeros(self.num_vars)
        for k, v in self.objective.terms.items():
            c[k] += v
        return c

    def write_lp(self, path) -> None:
        """Write the problem in CPLEX LP text format."""
        write_lp_file(self, path)


@dataclass
class Solution:
    status: Status
    objective: float = math.nan
    x: np.ndarray | None = None
    duals: dict[str, float] = field(default_factory=dict)
    mip_gap: float | None = None
    names: list[str] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.GAP_LIMIT) and self.x is not None

    def value(self, item) -> float:
        if isinstance(item, Var):
            return float(self.x[item.index])
        e = LinExpr.of(item)
        return float(sum(v * self.x[k] for k, v in e.terms.items()) + e.const)

    __getitem__ = value

    def values(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.x)))

    def by_name(self, name: str) -> float:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = self.__dict__["_idx"] = {n: k for k, n in enumerate(self.names)}
        return float(self.x[idx[name]])

    def dual(self, name: str) -> float:
        return self.duals[name]


# -- backends ------------------------------------------------------------------


def _default_backend() -> str:
    return os.environ.get("RESERVEX_SOLVER", "highs").lower()


def _solve_highs(pb: ProblemBuilder, integer: bool, rel_gap: float, time_limit: float | None) -> Solution:
    import highspy

    h = highspy.Highs()
    h.silent()
    h.setOptionValue("primal_feasibility_tolerance", PRIMAL_FEAS_TOL)
    h.setOptionValue("dual_feasibility_tolerance", DUAL_FEAS_TOL)
    if integer:
        h.setOptionValue("mip_rel_gap", rel_gap)
        h.setOptionValue("mip_feasibility_tolerance", INTEGRALITY_TOL)
        h.setOptionValue("random_seed", 0)
    if time_limit is not None:
        h.setOptionValue("time_limit", float(time_limit))

    A = pb.matrix().tocsc()
    lo, hi = pb.row_bounds()
    lp = highspy.HighsLp()
    lp.num_col_ = pb.num_vars
    lp.num_row_ = len(pb.constraints)
    lp.col_cost_ = pb.cost_vector()
    lp.col_lower_ = np.array(pb.lb)
    lp.col_upper_ = np.array(pb.ub)
    lp.row_lower_ = lo
    lp.row_upper_ = hi
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = A.indptr
    lp.a_matrix_.index_ = A.indices
    lp.a_matrix_.value_ = A.data
    lp.sense_ = highspy.ObjSense.kMaximize if pb.sense == "max" else highspy.ObjSense.kMinimize
    lp.offset_ = pb.objective.const
    if integer:
        lp.integrality_ = [
            highspy.HighsVarType.kInteger if flag else highspy.HighsVarType.kContinuous for flag in pb.integer
        ]
    status = h.passModel(lp)
    if status == highspy.HighsStatus.kError:
        raise SolverFailure(f"HiGHS rejected model {pb.name!r}")
    run = h.run()
    if run == highspy.HighsStatus.kError:
        raise SolverFailure(f"HiGHS failed on {pb.name!r}")
    ms = h.getModelStatus()
    MS = highspy.HighsModelStatus
    info = h.getInfo()
    if ms == MS.kInfeasible:
        return Solution(Status.INFEASIBLE, names=pb.names)
    if ms in (MS.kUnbounded, MS.kUnboundedOrInfeasible):
        return Solution(Status.UNBOUNDED, names=pb.names)
    has_sol = info.primal_solution_status == 2  # kSolutionStatusFeasible
    if ms == MS.kOptimal:
        st = Status.OPTIMAL
    elif ms in (MS.kTimeLimit, MS.kIterationLimit, MS.kSolutionLimit, MS.kInterrupt) and has_sol:
        st = Status.GAP_LIMIT
    else:
        raise SolverFailure(f"HiGHS returned {h.modelStatusToString(ms)} on {pb.name!r}")
    sol = h.getSolution()
    x = np.array(sol.col_value)
    out = Solution(st, float(info.objective_function_value), x, names=pb.names)
    if integer:
        out.mip_gap = float(info.mip_gap)
    elif sol.dual_valid:
        # HiGHS row duals are d(obj)/d(rhs) for both senses
        out.duals = {c.name: float(y) for c, y in zip(pb.constraints, sol.row_dual)}
    return out


def _solve_scipy(pb: ProblemBuilder, integer: bool, rel_gap: float, time_limit: float | None) -> Solution:
    from scipy.optimize import Bounds, LinearConstraint, linprog, milp

    c = pb.cost_vector()
    sign = -1.0 if pb.sense == "max" else 1.0
    A = pb.matrix()
    lo, hi = pb.row_bounds()
    bounds = list(zip(pb.lb, pb.ub))
    if integer:
        opts = {"mip_rel_gap": rel_gap, "disp": False}
        if time_limit is not None:
            opts["time_limit"] = float(time_limit)
        cons = [LinearConstraint(A, lo, hi)] if A.shape[0] else []
        res = milp(
            sign * c,
            constraints=cons,
            integrality=np.array(pb.integer, dtype=int),
            bounds=Bounds(np.array(pb.lb), np.array(pb.ub)),
            options=opts,
        )
        if res.status == 2:
            return Solution(Status.INFEASIBLE, names=pb.names)
        if res.status == 3:
            return Solution(Status.UNBOUNDED, names=pb.names)
        if res.x is None:
            raise SolverFailure(f"scipy.milp: {res.message}")
        st = Status.OPTIMAL if res.status == 0 else Status.GAP_LIMIT
        obj = sign * res.fun + pb.objective.const
        return Solution(st, obj, np.asarray(res.x), mip_gap=getattr(res, "mip_gap", None), names=pb.names)

    eq = [r for r, k in enumerate(pb.constraints) if k.sense == "=="]
    le = [r for r, k in enumerate(pb.constraints) if k.sense == "<="]
    ge = [r for r, k in enumerate(pb.constraints) if k.sense == ">="]
    A_ub = sp.vstack([A[le], -A[ge]]) if le or ge else None
    b_ub = np.concatenate([hi[le], -lo[ge]]) if le or ge else None
    res = linprog(
        sign * c,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A[eq] if eq else None,
        b_eq=lo[eq] if eq else None,
        bounds=bounds,
        method="highs",
        options={"time_limit": float(time_limit)} if time_limit else None,
    )
    if res.status == 2:
        return Solution(Status.INFEASIBLE, names=pb.names)
    if res.status == 3:
        return Solution(Status.UNBOUNDED, names=pb.names)
    if res.status != 0:
        raise SolverFailure(f"scipy.linprog: {res.message}")
    duals: dict[str, float] = {}
    ub_marg = res.ineqlin.marginals if A_ub is not None else []
    for pos, r in enumerate(le):
        duals[pb.constraints[r].name] = sign * float(ub_marg[pos])
    for pos, r in enumerate(ge):
        duals[pb.constraints[r].name] = -sign * float(ub_marg[len(le) + pos])
    for pos, r in enumerate(eq):
        duals[pb.constraints[r].name] = sign * float(res.eqlin.marginals[pos])
    obj = sign * res.fun + pb.objective.const
    return Solution(Status.OPTIMAL, obj, np.asarray(res.x), duals, names=pb.names)


_BACKENDS = {"highs": _solve_highs, "scipy": _solve_scipy}


def _dispatch(backend: str | None):
    name = backend or _default_backend()
    try:
        return _BACKENDS[name]
    except KeyError:
        raise SolverFailure(f"unknown solver backend {name!r}; choose from {sorted(_BACKENDS)}") from None


def solve_lp(pb: ProblemBuilder, backend: str | None = None, time_limit: float | None = None) -> Solution:
    """Solve a pure LP; duals are attached for every named row when optimal."""
    if pb.is_mip:
        raise ValueError(f"{pb.name!r} has integer variables; use solve_milp")
    sol = _dispatch(backend)(pb, False, 0.0, time_limit)
    if sol.status is Status.OPTIMAL:
        viol = max_violation(pb, sol.x)
        if viol > 1e-6 * max(1.0, _scale(pb)):
            log.warning("%s: primal violation %.3g after LP solve", pb.name, viol)
    return sol


def solve_milp(
    pb: ProblemBuilder,
    rel_gap: float = MIP_REL_GAP,
    backend: str | None = None,
    time_limit: float | None = None,
    polish: bool = True,
) -> Solution:
    """Solve a MILP to ``rel_gap``.

    With ``polish`` the integer variables are fixed at their rounded values and
    the remaining LP is re-solved, which removes the integrality-tolerance
    leakage that big-M rows otherwise let through.
    """
    if rel_gap < 0:
        raise ValueError("rel_gap must be nonnegative")
    if not pb.is_mip:
        sol = solve_lp(pb, backend, time_limit)
        sol.duals = {}
        sol.mip_gap = 0.0 if sol.ok else None
        return sol
    sol = _dispatch(backend)(pb, True, rel_gap, time_limit)
    if not sol.ok:
        return sol
    ints = np.flatnonzero(pb.integer)
    sol.x[ints] = np.round(sol.x[ints])
    if polish:
        fixed = _fixed_copy(pb, sol.x)
        lp = _dispatch(backend)(fixed, False, 0.0, time_limit)
        if lp.status is Status.OPTIMAL:
            sol.x = lp.x
            sol.objective = lp.objective
        else:
            log.warning("%s: polishing LP returned %s; keeping raw MILP point", pb.name, lp.status.value)
    return sol


def _fixed_copy(pb: ProblemBuilder, x: np.ndarray) -> ProblemBuilder:
    out = ProblemBuilder(pb.name + ":fixed")
    out.names = list(pb.names)
    out._var_names = dict(pb._var_names)
    out.lb = list(pb.lb)
    out.ub = list(pb.ub)
    out.integer = [False] * pb.num_vars
    for k in np.flatnonzero(pb.integer):
        out.lb[k] = out.ub[k] = float(x[k])
    out.constraints = pb.constraints
    out._row_names = pb._row_names
    out.objective = pb.objective
    out.sense = pb.sense
    return out


def _scale(pb: ProblemBuilder) -> float:
    return max([abs(c.rhs) for c in pb.constraints] + [1.0])


def max_violation(pb: ProblemBuilder, x: np.ndarray) -> float:
    """Largest absolute violation of rows and bounds at point ``x``."""
    worst = 0.0
    if pb.constraints:
        act = pb.matrix() @ x
        for a, c in zip(act, pb.constraints):
            if c.sense in ("<=", "=="):
                worst = max(worst, a - c.rhs)
            if c.sense in (">=", "=="):
                worst = max(worst, c.rhs - a)
    lb = np.array(pb.lb)
    ub = np.array(pb.ub)
    if len(x):
        worst = max(worst, float(np.max(lb - x)), float(np.max(x - ub)))
    return worst


def dual_objective(pb: ProblemBuilder, sol: Solution) -> float:
    """Objective of the LP dual assembled from row duals and reduced costs.

    Used to check strong duality; variable bounds contribute through the
    reduced costs ``c - A^T y``.
    """
    y = np.array([sol.duals[c.name] for c in pb.constraints])
    rhs = np.array([c.rhs for c in pb.constraints])
    d = pb.cost_vector() - pb.matrix().T @ y
    val = float(rhs @ y) + pb.objective.const
    lb, ub = np.array(pb.lb), np.array(pb.ub)
    for k, dk in enumerate(d):
        if abs(dk) < 1e-12:
            continue
        # reduced cost sign picks the active bound
        positive = dk > 0 if pb.sense == "min" else dk < 0
        bound = lb[k] if positive else ub[k]
        if not math.isfinite(bound):
            bound = sol.x[k]
        val += dk * bound
    return val


def _fmt(v: float) -> str:
    return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def _lp_name(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "_.[]" else "_" for ch in s)


def write_lp_file(pb: ProblemBuilder, path) -> None:
    def terms(e: LinExpr) -> str:
        parts = []
        for k, v in sorted(e.terms.items()):
            if v == 0:
                continue
            parts.append(f"{'+' if v >= 0 else '-'} {_fmt(abs(v))} {_lp_name(pb.names[k])}")
        return " ".join(parts) if parts else "0 " + _lp_name(pb.names[0]) if pb.names else "0"

    lines = [f"\\ {pb.name}", "Maximize" if pb.sense == "max" else "Minimize", " obj: " + terms(pb.objective)]
    lines.append("Subject To")
    for c in pb.constraints:
        op = {"<=": "<=", ">=": ">=", "==": "="}[c.sense]
        lines.append(f" {_lp_name(c.name)}: {terms(c.expr)} {op} {_fmt(c.rhs)}")
    lines.append("Bounds")
    for n, lo, hi in zip(pb.names, pb.lb, pb.ub):
        lines.append(f" {_fmt(lo)} <= {_lp_name(n)} <= {_fmt(hi)}")
    ints = [_lp_name(n) for n, f in zip(pb.names, pb.integer) if f]
    if ints:
        lines.append("General")
        lines.extend(" " + n for n in ints)
    lines.append("End")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

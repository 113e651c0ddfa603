import highspy
import numpy as np
import pytest
from scipy.optimize import linprog

from reservex.markets import reserve_problem
from reservex.solver import ProblemBuilder, Status, dual_objective, lsum, max_violation, solve_lp, solve_milp

BACKENDS = ["highs", "scipy"]


@pytest.mark.parametrize("backend", BACKENDS)
def test_bound_row_dual(backend):
    pb = ProblemBuilder()
    x = pb.add_var("x", -10.0, 10.0)
    pb.add_constr(x, ">=", 3.0, "lb")
    pb.set_objective(x)
    sol = solve_lp(pb, backend)
    assert sol.status is Status.OPTIMAL
    assert sol.objective == pytest.approx(3.0)
    assert sol.dual("lb") == pytest.approx(1.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_infeasible(backend):
    pb = ProblemBuilder()
    x = pb.add_var("x", -10.0, 10.0)
    pb.add_constr(x, ">=", 1.0)
    pb.add_constr(x, "<=", 0.0)
    pb.set_objective(0.0 * x)
    assert solve_lp(pb, backend).status is Status.INFEASIBLE


@pytest.mark.parametrize("backend", BACKENDS)
def test_unbounded(backend):
    pb = ProblemBuilder()
    x = pb.add_var("x", -np.inf, np.inf)
    pb.add_constr(x, "<=", 1.0)
    pb.set_objective(x)
    assert solve_lp(pb, backend).status is Status.UNBOUNDED


@pytest.mark.parametrize("backend", BACKENDS)
def test_knapsack(backend):
    pb = ProblemBuilder()
    x, y = pb.add_binary("x"), pb.add_binary("y")
    pb.add_constr(x + y, "<=", 1.0)
    pb.set_objective(3 * x + 2 * y, "max")
    sol = solve_milp(pb, 0.0, backend)
    assert sol.objective == pytest.approx(3.0)
    assert sol.value(x) == 1.0 and sol.value(y) == 0.0


def test_milp_without_integers_matches_lp():
    pb = ProblemBuilder()
    x, y = pb.add_var("x"), pb.add_var("y")
    pb.add_constr(x + 2 * y, ">=", 4.0)
    pb.add_constr(3 * x + y, ">=", 3.0)
    pb.set_objective(x + y)
    assert solve_milp(pb).objective == pytest.approx(solve_lp(pb).objective, abs=1e-9)


def test_builder_rejects_duplicates_and_bad_sense():
    pb = ProblemBuilder()
    x = pb.add_var("x")
    with pytest.raises(ValueError):
        pb.add_var("x")
    pb.add_constr(x, "<=", 1.0, "r")
    with pytest.raises(ValueError):
        pb.add_constr(x, "<=", 1.0, "r")
    with pytest.raises(ValueError):
        pb.add_constr(x, "<", 1.0)
    with pytest.raises(ValueError):
        pb.add_var("y", 2.0, 1.0)


def test_reserve_lp_base(base):
    pb = reserve_problem(base, base.chi_vector([0, 0]), base.requirements())
    sol = solve_lp(pb)
    assert sol.objective == pytest.approx(194.0, abs=0.05)


def _random_lp(rng, n=6, m=5):
    pb = ProblemBuilder("rand")
    xs = [pb.add_var(f"x{k}", 0.0, float(rng.uniform(1, 5))) for k in range(n)]
    A = rng.uniform(-1, 2, size=(m, n))
    b = A @ np.array([0.5] * n)
    for r in range(m):
        pb.add_constr(lsum(A[r, k] * xs[k] for k in range(n)), ">=" if r % 2 else "<=", float(b[r]), f"r{r}")
    c = rng.uniform(-2, 3, size=n)
    pb.set_objective(lsum(c[k] * xs[k] for k in range(n)))
    return pb, A, b, c


@pytest.mark.parametrize("seed", range(5))
def test_random_lp_against_linprog(seed):
    # independent formulation through scipy's linprog
    rng = np.random.default_rng(seed)
    pb, A, b, c = _random_lp(rng)
    sol = solve_lp(pb)
    sign = np.array([1.0 if r % 2 == 0 else -1.0 for r in range(len(b))])
    ref = linprog(c, A_ub=A * sign[:, None], b_ub=b * sign, bounds=list(zip(pb.lb, pb.ub)), method="highs")
    assert sol.objective == pytest.approx(ref.fun, rel=1e-9, abs=1e-9)
    # strong duality and complementary slackness on the returned pair
    assert dual_objective(pb, sol) == pytest.approx(sol.objective, rel=1e-6, abs=1e-8)
    act = pb.matrix() @ sol.x
    for a, con in zip(act, pb.constraints):
        assert abs(sol.duals[con.name] * (a - con.rhs)) <= 1e-7
    assert max_violation(pb, sol.x) <= 1e-8


def test_deterministic_objective(base):
    pb = reserve_problem(base, base.chi_vector(), base.requirements())
    assert solve_lp(pb).objective == solve_lp(pb).objective


def test_lp_file_reads_back(tmp_path):
    rng = np.random.default_rng(3)
    pb, *_ = _random_lp(rng)
    x = pb.add_binary("z")
    pb.add_constr(x, "<=", 0.5 + 0.5)
    path = tmp_path / "m.lp"
    pb.write_lp(path)
    h = highspy.Highs()
    h.silent()
    h.readModel(str(path))
    h.run()
    assert h.getInfo().objective_function_value == pytest.approx(solve_milp(pb).objective, abs=1e-7)


def test_negative_gap_rejected():
    pb = ProblemBuilder()
    pb.add_binary("b")
    with pytest.raises(ValueError):
        solve_milp(pb, -1.0)

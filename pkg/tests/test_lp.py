import numpy as np
import pytest

from bidfit.consumer import BidModel, build_consumer_lp, materialize_bid
from bidfit.lp import LpProblem, check_kkt, solve
from oracles import vertex_enumeration


def one_variable_lp():
    lp = LpProblem(sense="max")
    x = lp.add_variables("x", lb=0.0)
    lp.add_objective(1.0, x)
    lp.add_constraints("cap", [(1.0, x)], "<=", 3.0)
    return lp


def test_one_variable_max():
    sol = solve(one_variable_lp())
    assert sol.optimal
    assert sol.objective == pytest.approx(3.0)
    assert sol.dual("cap") == pytest.approx(1.0)


def test_contradictory_bounds_infeasible():
    lp = LpProblem()
    x = lp.add_variables("x", lb=-np.inf)
    lp.add_constraints("lo", [(1.0, x)], ">=", 1.0)
    lp.add_constraints("hi", [(1.0, x)], "<=", 0.0)
    sol = solve(lp)
    assert sol.status == "infeasible"
    with pytest.raises(RuntimeError):
        sol.raise_for_status()


def test_unbounded():
    lp = LpProblem(sense="max")
    x = lp.add_variables("x", lb=0.0)
    lp.add_objective(1.0, x)
    assert solve(lp).status == "unbounded"


def test_declaration_errors():
    lp = LpProblem()
    x = lp.add_variables("x", 2)
    with pytest.raises(ValueError):
        lp.add_variables("x", 2)
    with pytest.raises(ValueError):
        lp.add_constraints("c", [(1.0, x + 5)], "<=", 0.0)
    with pytest.raises(ValueError):
        lp.add_constraints("d", [(np.nan, x)], "<=", [0.0, 0.0])
    with pytest.raises(ValueError):
        lp.add_constraints("e", [(1.0, x)], "<>", [0.0, 0.0])


def random_feasible_lp(rng, n, m):
    """Bounded feasible ``min c'x, A x <= b`` with a known interior point."""
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(-1.0, 1.0, n)
    b = A @ x0 + rng.uniform(0.1, 1.0, m)
    A = np.vstack([A, np.eye(n), -np.eye(n)])
    b = np.concatenate([b, np.full(n, 5.0), np.full(n, 5.0)])
    return rng.normal(size=n), A, b


def dense_lp(c, A, b):
    lp = LpProblem()
    x = lp.add_variables("x", c.size, lb=-np.inf)
    lp.add_objective(c, x)
    lp.add_constraints("rows", [(A, x[None, :])], "<=", b)
    return lp


@pytest.mark.parametrize("seed", range(5))
def test_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    c, A, b = random_feasible_lp(rng, 5, 8)
    expected, _ = vertex_enumeration(c, A, b)
    sol = solve(dense_lp(c, A, b))
    assert sol.objective == pytest.approx(expected, abs=1e-7)


def test_large_random_lp_kkt_and_duality(rng):
    c, A, b = random_feasible_lp(rng, 20, 30)
    sol = solve(dense_lp(c, A, b))
    assert sol.optimal
    assert sol.residuals.ok(1e-7)
    assert sol.residuals.gap <= 1e-7 * (1 + abs(sol.objective))
    assert check_kkt(sol.problem, sol).ok(1e-7)


def test_perturbed_primal_residual():
    sol = solve(one_variable_lp())
    report = check_kkt(sol.problem, sol, x=sol.x + 0.25)
    assert report.primal == pytest.approx(0.25)


def test_row_permutation_invariance(rng):
    c, A, b = random_feasible_lp(rng, 6, 12)
    base = solve(dense_lp(c, A, b)).objective
    perm = rng.permutation(A.shape[0])
    assert solve(dense_lp(c, A[perm], b[perm])).objective == pytest.approx(base, abs=1e-7)


def test_consumer_lp_complementarity():
    model = BidModel([0.3, 0.2, 0.1], ramp_up=2.0, ramp_down=2.0, pmin=1.0, pmax=10.0)
    bid = materialize_bid(model, np.zeros((6, 0)))
    prices = np.array([0.05, 0.35, 0.15, 0.25, 0.05, 0.35])
    sol = solve(build_consumer_lp(bid, prices))
    assert sol.residuals.complementarity <= 1e-6


def test_equality_rows_and_relation_change():
    lp = LpProblem()
    x = lp.add_variables("x", 2)
    lp.add_objective([1.0, 2.0], x)
    lp.add_constraints("sum", [(1.0, x[None, :])], ">=", [1.0])
    assert solve(lp).objective == pytest.approx(1.0)
    lp.add_constraints("fix", [(1.0, x[1])], "<=", 4.0)
    lp.set_relation("fix", "==")
    assert solve(lp).objective == pytest.approx(8.0)


def test_lp_text_export():
    text = one_variable_lp().to_lp_text()
    assert text.splitlines()[1] == "Maximize"
    assert "cap: + 1.0 x <= 3.0" in text
    assert text.rstrip().endswith("End")

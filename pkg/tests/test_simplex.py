import numpy as np
import pytest
from scipy.optimize import linprog as scipy_linprog

from mgspa.simplex import LPError, linprog, solve_matrix_game


def _random_feasible_lp(rng, n, m_ub, m_eq):
    x0 = rng.uniform(0, 2, n)
    A_ub = rng.normal(size=(m_ub, n))
    b_ub = A_ub @ x0 + rng.uniform(0, 1, m_ub)
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = A_eq @ x0
    # bounded: add sum x <= big
    A_ub = np.vstack([A_ub, np.ones(n)])
    b_ub = np.append(b_ub, 10 * n)
    return rng.normal(size=n), A_ub, b_ub, A_eq, b_eq


@pytest.mark.parametrize("seed", range(40))
def test_matches_scipy_on_random_lps(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    c, A_ub, b_ub, A_eq, b_eq = _random_feasible_lp(rng, n, int(rng.integers(1, 6)), int(rng.integers(0, 3)))
    ours = linprog(c, A_ub, b_ub, A_eq if len(A_eq) else None, b_eq if len(b_eq) else None)
    ref = scipy_linprog(c, A_ub, b_ub, A_eq if len(A_eq) else None, b_eq if len(b_eq) else None, bounds=(0, None), method="highs")
    assert ref.status == 0
    assert ours.fun == pytest.approx(ref.fun, abs=1e-7 * max(1, abs(ref.fun)))
    assert np.all(A_ub @ ours.x <= b_ub + 1e-7)
    assert np.all(ours.x >= 0)


@pytest.mark.parametrize("seed", range(20))
def test_strong_duality(seed):
    rng = np.random.default_rng(100 + seed)
    c, A_ub, b_ub, A_eq, b_eq = _random_feasible_lp(rng, 5, 4, 2)
    res = linprog(c, A_ub, b_ub, A_eq, b_eq)
    dual_obj = res.duals_ub @ b_ub + res.duals_eq @ b_eq
    assert dual_obj == pytest.approx(res.fun, abs=1e-7)
    assert np.all(res.duals_ub <= 1e-9)
    # dual feasibility: c - A^T y >= 0
    assert np.all(c - A_ub.T @ res.duals_ub - A_eq.T @ res.duals_eq >= -1e-7)


def test_infeasible_and_unbounded():
    with pytest.raises(LPError, match="infeasible"):
        linprog([1.0], A_ub=[[1.0]], b_ub=[-1.0])
    with pytest.raises(LPError, match="unbounded"):
        linprog([-1.0, 0.0], A_ub=[[0.0, 1.0]], b_ub=[1.0])


def test_free_variables():
    # min x subject to x >= -3 with x free
    res = linprog([1.0], A_ub=[[-1.0]], b_ub=[3.0], free=[0])
    assert res.x[0] == pytest.approx(-3.0)


def test_matching_pennies():
    v, x, y = solve_matrix_game([[1, -1], [-1, 1]])
    assert v == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(x, 0.5) and np.allclose(y, 0.5)


@pytest.mark.parametrize("seed", range(20))
def test_matrix_game_against_scipy(seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
    v, x, y = solve_matrix_game(M)
    nr, nc = M.shape
    # reference: max t s.t. M^T x >= t, sum x = 1
    c = np.zeros(nr + 1)
    c[-1] = -1
    ref = scipy_linprog(c, np.hstack([-M.T, np.ones((nc, 1))]), np.zeros(nc), np.append(np.ones(nr), 0)[None], [1], bounds=[(0, None)] * nr + [(None, None)], method="highs")
    assert v == pytest.approx(-ref.fun, abs=1e-8)
    assert (x @ M).min() == pytest.approx(v, abs=1e-8)
    assert (M @ y).max() == pytest.approx(v, abs=1e-8)

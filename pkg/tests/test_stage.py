import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgspa.model import ConfigurationError, build_toy_two_player, random_model
from mgspa.simplex import solve_matrix_game
from mgspa.stage import (
    BehavioralStrategy,
    StageGame,
    StageSolveError,
    build_stage_game,
    exploitability,
    expected_payoff,
    extract_marginals,
    factorization_residual,
    game_value,
    solve_zero_sum,
    stage_game_from_dict,
    stage_game_from_q,
    stage_game_to_dict,
)


def brute_force_value(game: StageGame) -> float:
    """Value via the normal form: enumerate every pure strategy map."""
    S, M, A = game.payoff.shape
    K = game.n_infosets
    p1 = list(itertools.product(range(M), repeat=S))
    p2 = list(itertools.product(range(A), repeat=K))
    mat = np.zeros((len(p2), len(p1)))
    for j, pm in enumerate(p1):
        for i, am in enumerate(p2):
            mat[i, j] = sum(game.state_weights[s] * game.payoff[s, pm[s], am[game.info[s, pm[s]]]] for s in range(S))
    return solve_matrix_game(mat)[0]


@pytest.fixture
def toy():
    return build_toy_two_player()


def test_payoffs_from_value(toy):
    a11, a10 = toy.joint_action((1, 1)), toy.joint_action((1, 0))
    g0 = build_stage_game(toy, np.zeros(2))
    assert np.all(g0.payoff[0, :, a11] == 1.0)
    g50 = build_stage_game(toy, np.full(2, 50.0))
    assert np.allclose(g50.payoff[0, :, a11], 50.5)
    assert np.allclose(g50.payoff[0, :, a10], 49.5)
    assert g50.state_weights.sum() == pytest.approx(1.0)


def test_matching_pennies():
    rep = solve_zero_sum(StageGame.from_matrix([[1, -1], [-1, 1]]))
    assert rep.game_value == pytest.approx(0.0, abs=1e-10)
    assert np.allclose(rep.strategy.lam, 0.5) and np.allclose(rep.strategy.chi, 0.5)


def test_pure_saddle():
    rep = solve_zero_sum(StageGame.from_matrix([[3, 1], [2, 2]]))
    assert rep.game_value == pytest.approx(2.0, abs=1e-10)
    assert rep.strategy.chi[0, 1] == pytest.approx(1.0)


def test_toy_stage_game_at_fixed_point(toy):
    game = build_stage_game(toy, np.full(2, 50.0))
    rep = solve_zero_sum(game)
    assert rep.game_value == pytest.approx(50.0, abs=1e-9)
    assert rep.exploitability <= 1e-8
    marg = extract_marginals(game, rep, toy)
    for p in marg.policy.agent + marg.policy.adversary:
        assert np.allclose(p, 0.5, atol=1e-8)


def test_toy_uniform_exploitability_brute_force(toy):
    game = build_stage_game(toy, np.full(2, 50.0))
    uniform = BehavioralStrategy(np.full((2, 4), 0.25), np.full((game.n_infosets, 4), 0.25))
    assert exploitability(game, uniform) <= 1e-10


def test_exploitability_matching_pennies_point_mass():
    game = StageGame.from_matrix([[1, -1], [-1, 1]])
    strat = BehavioralStrategy(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    # P1 best response to a pure row earns -1; P2 best response to uniform earns 0
    assert exploitability(game, strat) == pytest.approx(1.0)


def _random_game(rng, max_size=3):
    m = random_model(rng, max_size=max_size)
    q = rng.normal(size=(m.n_states, m.n_joint_actions, m.n_joint_perturbations))
    return stage_game_from_q(m, q)


@pytest.mark.parametrize("seed", range(25))
def test_lp_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    game = _random_game(rng, max_size=2 + seed % 2)
    if (game.n_moves ** game.n_states) * (game.n_actions ** game.n_infosets) > 20000:
        pytest.skip("normal form too large for brute force")
    rep = solve_zero_sum(game, tol=1e-8)
    assert rep.game_value == pytest.approx(brute_force_value(game), abs=1e-7)
    assert rep.exploitability <= 1e-8 + 1e-8 * np.abs(game.payoff).max()


@pytest.mark.parametrize("seed", range(10))
def test_three_methods_agree(seed):
    rng = np.random.default_rng(50 + seed)
    game = _random_game(rng)
    lp = solve_zero_sum(game, method="sequence-form-lp")
    cfr = solve_zero_sum(game, method="regret-selfplay", tol=1e-4)
    assert cfr.game_value == pytest.approx(lp.game_value, abs=1e-3)
    try:
        nf = solve_zero_sum(game, method="normal-form-lp")
    except StageSolveError:
        return
    assert nf.game_value == pytest.approx(lp.game_value, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_value_is_affine_equivariant(seed, a, c):
    game = _random_game(np.random.default_rng(seed))
    moved = StageGame(a * game.payoff + c, game.info, game.state_weights, game.states, game.infosets)
    assert game_value(moved) == pytest.approx(a * game_value(game) + c, abs=1e-7 * (1 + abs(c) + a))


def test_constant_game_is_trivial():
    game = StageGame.from_matrix(np.full((3, 2), 4.0))
    rep = solve_zero_sum(game)
    assert rep.game_value == 4.0 and rep.exploitability == 0.0


def test_unknown_method_rejected():
    with pytest.raises(ConfigurationError):
        solve_zero_sum(StageGame.from_matrix([[1]]), method="guess")


def test_regret_budget_exhaustion_reports_best():
    game = StageGame.from_matrix([[3, -1], [-2, 1]])
    with pytest.raises(StageSolveError) as err:
        solve_zero_sum(game, method="regret-selfplay", tol=0.0, max_iter=3)
    assert err.value.report is not None


def test_factorization_residual_examples():
    sizes = (2, 2)
    assert factorization_residual(np.full((1, 4), 0.25), sizes) == 0.0
    point = np.zeros((1, 4))
    point[0, 2] = 1.0  # joint action (1, 0)
    assert factorization_residual(point, sizes) == 0.0
    corr = np.array([[0.5, 0.0, 0.0, 0.5]])
    assert factorization_residual(corr, sizes) == pytest.approx(0.25)


def test_correlated_strategy_warns(toy):
    game = build_stage_game(toy, np.zeros(2))
    chi = np.tile([0.5, 0.0, 0.0, 0.5], (game.n_infosets, 1))
    strat = BehavioralStrategy(np.full((2, 4), 0.25), chi)
    with pytest.warns(UserWarning, match="factorise"):
        marg = extract_marginals(game, strat, toy)
    assert marg.residual == pytest.approx(0.25)
    assert np.allclose(marg.policy.agent[0], 0.5)


def test_game_round_trip(toy):
    game = build_stage_game(toy, np.array([1.0, 2.0]))
    back = stage_game_from_dict(stage_game_to_dict(game))
    assert np.array_equal(back.payoff, game.payoff)
    assert np.array_equal(back.info, game.info)
    assert game_value(back) == game_value(game)


def test_invalid_weights():
    with pytest.raises(ConfigurationError):
        StageGame(np.zeros((2, 1, 1)), np.zeros((2, 1), int), np.array([0.7, 0.7]))


def test_expected_payoff_matches_value(toy):
    game = build_stage_game(toy, np.array([3.0, -1.0]))
    rep = solve_zero_sum(game)
    assert expected_payoff(game, rep.strategy) == pytest.approx(rep.game_value)

import numpy as np
import pytest

from mgspa.model import ConfigurationError, build_toy_two_player, random_model
from mgspa.planning import q_from_v, value_iteration
from mgspa.rmaq import LrSchedule, greedy_policy_from_q, make_learner, rmaq_update, train_rmaq
from mgspa.stage import exploitability, solve_zero_sum, stage_game_from_q


@pytest.fixture
def toy():
    return build_toy_two_player()


def test_schedule():
    assert LrSchedule("constant", 0.1).rate(50) == 0.1
    assert LrSchedule("per-visit-harmonic", 1.0).rate(3) == pytest.approx(0.25)
    with pytest.raises(ConfigurationError):
        LrSchedule("cosine")


def test_zero_step_size_keeps_q(toy):
    lr = make_learner(toy)
    lr.q[:] = np.random.default_rng(0).normal(size=lr.q.shape)
    before = lr.q.copy()
    rmaq_update(lr, (0, 3, 1, [1.0, 1.0], 1), alpha=0.0)
    assert np.array_equal(lr.q, before)


def test_full_step_without_discount_stores_reward():
    m = build_toy_two_player(gamma=0.0)
    lr = make_learner(m)
    rmaq_update(lr, (0, (1, 1), (0, 1), [1.0, 1.0], 1), alpha=1.0)
    a, b = m.joint_action((1, 1)), m.joint_perturbation((0, 1))
    assert np.allclose(lr.q[:, 0, a, b], 1.0)


def test_update_uses_stage_value(toy):
    lr = make_learner(toy)
    lr.q[:] = 10.0
    rmaq_update(lr, (0, 0, 0, [1.0, 1.0], 1), alpha=0.5)
    # bootstrap from a constant stage game at s1 is 10
    assert np.allclose(lr.q[:, 0, 0, 0], 0.5 * 10 + 0.5 * (1 + 0.99 * 10))


def test_zero_episodes_keeps_zeros(toy):
    lr, curve = train_rmaq(toy, 0)
    assert curve == [] and not lr.q.any()


def test_q_stays_bounded_and_deterministic(toy):
    a, ca = train_rmaq(toy, 20, seed=3)
    b, cb = train_rmaq(toy, 20, seed=3)
    assert a.within_bounds()
    assert np.array_equal(a.q, b.q)
    assert [c["discounted_return"] for c in ca] == [c["discounted_return"] for c in cb]


def test_q_converges_with_many_updates():
    # a short horizon makes convergence cheap; the fixed point is the planning one
    m = build_toy_two_player(gamma=0.5)
    q_star = q_from_v(m, value_iteration(m, tol=1e-10).v_star[0])
    lr, curve = train_rmaq(m, 60, schedule=LrSchedule("constant", 0.5), q_star=q_star, seed=0, record_returns=False)
    assert curve[-1]["q_gap"] < 0.05


def test_greedy_policy_at_exact_q(toy):
    v = value_iteration(toy, tol=1e-9).v_star[0]
    lr = make_learner(toy)
    lr.q[:] = q_from_v(toy, v)[None]
    pol = greedy_policy_from_q(lr)
    for p in pol.agent:
        assert np.allclose(p, 0.5, atol=0.05)
    game = stage_game_from_q(toy, lr.q[0])
    assert solve_zero_sum(game, tol=lr.stage_tol).exploitability <= lr.stage_tol


def test_zero_q_has_zero_exploitability(toy):
    lr = make_learner(toy)
    game = stage_game_from_q(toy, lr.q[0])
    rep = solve_zero_sum(game)
    assert exploitability(game, rep.strategy) == 0.0


def test_out_of_range_transition(toy):
    with pytest.raises(ConfigurationError):
        rmaq_update(make_learner(toy), (5, 0, 0, [0, 0], 0))


def test_random_model_training_runs():
    m = random_model(np.random.default_rng(2))
    lr, curve = train_rmaq(m, 5, exploration="epsilon-greedy", seed=1)
    assert len(curve) == 5 and lr.within_bounds()

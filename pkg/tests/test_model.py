import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgspa.model import (
    ConfigurationError,
    JointPolicy,
    MgSpaModel,
    PerturbFn,
    build_toy_two_player,
    discounted_return,
    flip_adversary,
    load_model,
    model_from_dict,
    model_to_dict,
    perturb,
    policy_evaluation,
    project_to_ball,
    random_model,
    save_model,
    step,
    toy_nash_policy,
    uniform_policy,
)


@pytest.fixture
def toy():
    return build_toy_two_player()


def test_toy_rewards_and_transitions(toy):
    a11 = toy.joint_action((1, 1))
    a10 = toy.joint_action((1, 0))
    for b in range(toy.n_joint_perturbations):
        assert toy.rewards[0, 0, a11, b] == 1.0
        assert toy.rewards[1, 0, a11, b] == 1.0
        assert toy.transition[0, a11, b, 1] == 1.0
        assert toy.transition[0, a10, b, 0] == 1.0
        assert toy.rewards[0, 1, a10, b] == 1.0
        assert toy.rewards[0, 1, a11, b] == 0.0


def test_toy_perturbation_table(toy):
    tab = toy.perturb.table_for(0)
    assert tab[0, 1] == 1 and tab[0, 0] == 0
    assert perturb(toy, 0, (0, 1)) == (0, 1)
    assert toy.is_bijective()


def test_model_invariants(toy):
    assert np.allclose(toy.transition.sum(-1), 1.0)
    assert toy.reward_bound >= np.abs(toy.rewards).max()
    assert toy.shared_reward
    with pytest.raises(ValueError):
        toy.transition[0, 0, 0, 0] = 0.5  # stored arrays are read-only


def test_invalid_transition_rejected(toy):
    P = np.array(toy.transition)
    P[0, 0, 0] = [0.7, 0.7]
    with pytest.raises(ConfigurationError):
        MgSpaModel((2, 2), (2, 2), P, toy.rewards, toy.perturb)


def test_unknown_perturbation_kind():
    with pytest.raises(ConfigurationError):
        PerturbFn("sideways")


def test_joint_index_round_trip(toy):
    for a in itertools.product(range(2), range(2)):
        assert toy.split_action(toy.joint_action(a)) == a


def test_linear_additive_examples():
    fn = PerturbFn("linear-additive")
    assert fn.apply(np.array([0.3]), np.array([0.2]), 0.5)[0] == pytest.approx(0.5)
    assert fn.apply(np.array([0.0]), np.array([0.9]), 0.5)[0] == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=4),
    st.floats(0.0, 2.0),
    st.sampled_from(["linf", "l2"]),
    st.integers(0, 1000),
)
def test_projection_stays_in_ball(xs, eps, metric, seed):
    s = np.array(xs)
    rng = np.random.default_rng(seed)
    out = project_to_ball(s, s + rng.normal(scale=3, size=s.shape), eps, metric)
    d = out - s
    dist = np.abs(d).max() if metric == "linf" else np.linalg.norm(d)
    assert dist <= eps + 1e-12


def test_stochastic_kinds_need_rng():
    with pytest.raises(ConfigurationError):
        PerturbFn("uniform").apply(np.zeros(2), np.zeros(2), 0.5)


def test_step_deterministic_example(toy):
    pol = JointPolicy(
        agent=[np.array([[0, 1], [0, 1]], float)] * 2,
        adversary=[np.array([[1, 0], [1, 0]], float)] * 2,
    )
    res = step(toy, 0, pol, np.random.default_rng(0))
    assert res.b == (0, 0) and res.a == (1, 1)
    assert np.allclose(res.r, 1.0) and res.s_next == 1


def test_uniform_play_averages_half(toy):
    rng = np.random.default_rng(1)
    pol = uniform_policy(toy)
    s, total, n = 0, 0.0, 100_000
    for _ in range(n):
        res = step(toy, s, pol, rng)
        total += res.r[0]
        s = res.s_next
    assert total / n == pytest.approx(0.5, abs=0.02)


def test_discounted_return_examples():
    assert discounted_return([1, 0, 1], 0.5) == pytest.approx(1.25)
    assert discounted_return(np.zeros(10), 0.9) == 0.0
    assert discounted_return(np.ones(3000), 0.99) == pytest.approx(100.0, abs=1e-11)


def test_nash_policy_value_without_attack(toy):
    # unperturbed play with the Nash policy earns 1 every step
    v = policy_evaluation(toy, toy_nash_policy(1))
    assert np.allclose(v, 1.0 / (1.0 - toy.gamma))


def test_policy_evaluation_matches_monte_carlo(toy):
    pol = JointPolicy(toy_nash_policy(1).agent, flip_adversary(toy, 0.3))
    rng = np.random.default_rng(3)
    g = 0.9
    m = build_toy_two_player(g)
    v = policy_evaluation(m, pol)
    runs = []
    for _ in range(800):
        s, ret, disc = 0, 0.0, 1.0
        for _ in range(60):
            res = step(m, s, pol, rng)
            ret += disc * res.r[0]
            disc *= g
            s = res.s_next
        runs.append(ret)
    assert np.mean(runs) == pytest.approx(v[0, 0], abs=0.15)


def test_serialisation_round_trip(toy, tmp_path):
    path = tmp_path / "toy.json"
    save_model(toy, path)
    back = load_model(path)
    assert np.array_equal(back.transition, toy.transition)
    assert np.array_equal(back.rewards, toy.rewards)
    assert back.gamma == toy.gamma
    d = model_to_dict(toy)
    d["colour"] = "blue"
    with pytest.raises(ConfigurationError, match="colour"):
        model_from_dict(d)


@pytest.mark.parametrize("seed", range(10))
def test_random_models_are_valid(seed):
    m = random_model(np.random.default_rng(seed))
    assert m.is_bijective()
    assert 0.5 <= m.gamma <= 0.95
    assert np.allclose(m.transition.sum(-1), 1.0)

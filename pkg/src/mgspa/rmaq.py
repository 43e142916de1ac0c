"""Tabular robust multi-agent Q-learning.

Each update bootstraps through the stage game built on the current Q table:

    q(s, a, b) <- (1 - alpha) q(s, a, b) + alpha [r + gamma * V_q(s')]

where ``V_q(s')`` is the equilibrium value of the stage game on ``q`` for the
confusion class of ``s'`` (the same readout as the planning operator, so the
fixed point is ``q_* = r + gamma * P v_*``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConfigurationError, JointPolicy, MgSpaModel, policy_evaluation
from .planning import confusion_classes, solve_operator_games
from .stage import StageSolveError, extract_marginals, game_value, stage_game_from_q

__all__ = [
    "LrSchedule",
    "RmaqLearner",
    "make_learner",
    "rmaq_update",
    "train_rmaq",
    "greedy_policy_from_q",
]


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"
    base: float = 0.1

    def __post_init__(self):
        if self.kind not in ("constant", "per-visit-harmonic"):
            raise ConfigurationError(f"unknown learning-rate schedule {self.kind!r}")
        if not 0.0 <= self.base <= 1.0:
            raise ConfigurationError("learning rate base must lie in [0, 1]")

    def rate(self, visits: int) -> float:
        """Step size for an entry already visited ``visits`` times."""
        if self.kind == "constant":
            return self.base
        return self.base / (1.0 + visits)


@dataclass(eq=False)
class RmaqLearner:
    model: MgSpaModel
    q: np.ndarray  # (N, S, |A|, |B|)
    lr_schedule: LrSchedule
    visit_counts: np.ndarray
    stage_tol: float = 1e-7
    information: str = "pooled"
    rng: np.random.Generator | None = None
    skipped: int = 0
    solves: int = 0
    classes: list = field(default_factory=list)
    class_of: np.ndarray | None = None
    _version: np.ndarray | None = None
    _cache: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.classes:
            self.classes = confusion_classes(self.model, self.information)
        self.class_of = np.empty(self.model.n_states, dtype=int)
        for c, states in enumerate(self.classes):
            self.class_of[list(states)] = c
        self._version = np.zeros(len(self.classes), dtype=np.int64)

    @property
    def value_bound(self) -> float:
        return self.model.reward_bound / (1.0 - self.model.gamma) + 1.0

    def within_bounds(self) -> bool:
        return bool(np.abs(self.q).max() <= self.value_bound)

    def touch(self, s: int) -> None:
        """Invalidate cached stage values of ``s``'s class after a write."""
        self._version[self.class_of[s]] += 1

    def stage_value(self, s: int) -> np.ndarray:
        """Per-agent equilibrium value of the stage game on ``q`` at ``s``."""
        c = int(self.class_of[s])
        hit = self._cache.get(c)
        if hit is not None and hit[0] == self._version[c]:
            return hit[1]
        vals = np.empty(self.model.n_agents)
        for i in range(self.model.n_agents):
            vals[i] = game_value(stage_game_from_q(self.model, self.q[i], self.classes[c]))
        self.solves += 1
        self._cache[c] = (int(self._version[c]), vals)
        return vals


def make_learner(model: MgSpaModel, schedule: LrSchedule | None = None, seed: int = 0, **kw) -> RmaqLearner:
    if not model.shared_reward:
        raise ConfigurationError("RMAQ needs a shared-reward model")
    S, nA, nB = model.n_states, model.n_joint_actions, model.n_joint_perturbations
    return RmaqLearner(
        model=model,
        q=np.zeros((model.n_agents, S, nA, nB)),
        lr_schedule=schedule or LrSchedule(),
        visit_counts=np.zeros((S, nA, nB), dtype=np.int64),
        rng=np.random.default_rng(seed),
        **kw,
    )


def _index(model: MgSpaModel, x, joint) -> int:
    if isinstance(x, (tuple, list)):
        return joint(x)
    return int(x)


def rmaq_update(learner: RmaqLearner, transition, alpha: float | None = None) -> RmaqLearner:
    """Apply one update for ``transition = (s, a, b, r, s_next)`` in place.

    ``a``/``b`` may be joint indices or per-agent tuples; ``r`` is per agent.
    ``alpha`` overrides the schedule. A failing stage solve skips the update
    and increments ``learner.skipped``.
    """
    m = learner.model
    s, a, b, r, s_next = transition
    a = _index(m, a, m.joint_action)
    b = _index(m, b, m.joint_perturbation)
    if not (0 <= s < m.n_states and 0 <= s_next < m.n_states and 0 <= a < m.n_joint_actions and 0 <= b < m.n_joint_perturbations):
        raise ConfigurationError("transition indices out of range")
    if alpha is None:
        alpha = learner.lr_schedule.rate(int(learner.visit_counts[s, a, b]))
    try:
        boot = learner.stage_value(s_next)
    except StageSolveError:
        learner.skipped += 1
        return learner
    r = np.broadcast_to(np.asarray(r, dtype=float), (m.n_agents,))
    target = r + m.gamma * boot
    learner.q[:, s, a, b] = (1.0 - alpha) * learner.q[:, s, a, b] + alpha * target
    learner.visit_counts[s, a, b] += 1
    learner.touch(s)
    return learner


def greedy_policy_from_q(learner: RmaqLearner) -> JointPolicy:
    """Marginals of the stage-game equilibria on the current ``q``."""
    games, reports = solve_operator_games(learner.model, learner.q[0], learner.information, tol=learner.stage_tol)
    return extract_marginals(games, reports, learner.model, tol=np.inf).policy


def _greedy_strategies(learner: RmaqLearner):
    games, reports = solve_operator_games(learner.model, learner.q[0], learner.information, tol=learner.stage_tol)
    table = {}
    for g, rep in zip(games, reports):
        for si, s in enumerate(g.states):
            table[s] = (g, si, rep.strategy)
    return table


def train_rmaq(
    model: MgSpaModel,
    episodes: int,
    steps_per_episode: int = 25,
    exploration: str = "uniform",
    seed: int = 0,
    schedule: LrSchedule | None = None,
    explore_eps: float = 0.2,
    q_star=None,
    record_returns: bool = True,
    learner: RmaqLearner | None = None,
):
    """Run episodes of behaviour-policy interaction and RMAQ updates.

    Exploration is ``uniform`` (joint actions and perturbations uniformly at
    random) or ``epsilon-greedy`` (uniform with probability ``explore_eps``,
    otherwise the current stage equilibrium). Episodes start from a uniformly
    drawn state. The returned curve has one row per episode with the exact
    discounted return of the current greedy joint policy (averaged over start
    states) and ``||q - q_*||_inf`` when ``q_star`` is given.
    """
    if exploration not in ("uniform", "epsilon-greedy"):
        raise ConfigurationError(f"unknown exploration {exploration!r}")
    learner = learner or make_learner(model, schedule, seed)
    rng = learner.rng
    S, nA, nB = model.n_states, model.n_joint_actions, model.n_joint_perturbations
    curve = []
    greedy = None
    for ep in range(episodes):
        s = int(rng.integers(S))
        for _ in range(steps_per_episode):
            if exploration == "uniform" or rng.random() < explore_eps:
                a, b = int(rng.integers(nA)), int(rng.integers(nB))
            else:
                if greedy is None:
                    greedy = _greedy_strategies(learner)
                g, si, strat = greedy[s]
                b = int(rng.choice(g.n_moves, p=strat.lam[si]))
                a = int(rng.choice(g.n_actions, p=strat.chi[g.info[si, b]]))
            s_next = int(rng.choice(S, p=model.transition[s, a, b]))
            rmaq_update(learner, (s, a, b, model.rewards[:, s, a, b], s_next))
            greedy = None
            s = s_next
        row = {"episode": ep + 1, "discounted_return": float("nan"), "q_gap": float("nan")}
        if record_returns:
            pol = greedy_policy_from_q(learner)
            row["discounted_return"] = float(policy_evaluation(model, pol)[0].mean())
        if q_star is not None:
            row["q_gap"] = float(np.abs(learner.q - np.asarray(q_star)).max())
        curve.append(row)
    return learner, curve

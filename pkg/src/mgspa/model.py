"""Markov games with state-perturbation adversaries (tabular core).

A model couples N agents with N adversaries. Adversary ``i`` sees the true
state ``s`` and picks ``b^i``; agent ``i`` only sees ``f(s, b^i)`` and picks
``a^i``. Rewards are indexed by the true state and both joint actions, and
every adversary receives the negated reward of its agent.

Array conventions used throughout the package:

* joint actions / joint perturbations are flattened row-major over agents
  (agent 0 is the slowest-varying index);
* ``transition[s, a, b, s']`` and ``rewards[i, s, a, b]``;
* value tables are ``(N, S)`` arrays, action-value tables ``(N, S, |A|, |B|)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "ConfigurationError",
    "PERTURB_KINDS",
    "PerturbFn",
    "MgSpaModel",
    "JointPolicy",
    "StepResult",
    "project_to_ball",
    "build_toy_two_player",
    "toy_nash_policy",
    "flip_adversary",
    "random_model",
    "perturb",
    "step",
    "discounted_return",
    "policy_evaluation",
    "uniform_policy",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

PERTURB_KINDS = (
    "table-permutation",
    "linear-additive",
    "gaussian-additive",
    "uniform",
    "laplace-additive",
    "fixed-gaussian",
    "nonoptimal-gaussian",
)


class ConfigurationError(ValueError):
    """Invalid model, perturbation or experiment configuration."""


def project_to_ball(s, s_tilde, epsilon: float, metric: str = "linf") -> np.ndarray:
    """Project ``s_tilde`` onto the ``epsilon`` ball centred at ``s``.

    ``linf`` clamps each coordinate; ``l2`` rescales the offset radially.
    """
    s = np.asarray(s, dtype=float)
    d = np.asarray(s_tilde, dtype=float) - s
    if metric == "linf":
        d = np.clip(d, -epsilon, epsilon)
    elif metric == "l2":
        norm = float(np.linalg.norm(d))
        if norm > epsilon:
            d = d * (epsilon / norm)
    else:
        raise ConfigurationError(f"unknown metric {metric!r}")
    return s + d


@dataclass(eq=False)
class PerturbFn:
    """Perturbation function ``f(s, b)``.

    ``table-permutation`` is the tabular kind: ``table[i][s, b]`` is the state
    agent ``i`` observes. The remaining kinds act on real-valued observation
    vectors, with ``b`` an offset (or a noise mean) of the same shape.
    ``overrides`` maps an agent index to its own ``PerturbFn`` (heterogeneous
    adversaries).
    """

    kind: str = "table-permutation"
    table: tuple | None = None
    sigma: float = 1.0
    project: bool = True
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise ConfigurationError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "table-permutation":
            if self.table is None:
                raise ConfigurationError("table-permutation needs a table")
            tab = self.table
            if isinstance(tab, np.ndarray) and tab.ndim == 2:
                tab = (tab,)
            self.table = tuple(np.asarray(t, dtype=int) for t in tab)
            for t in self.table:
                t.setflags(write=False)
        if self.sigma < 0:
            raise ConfigurationError("sigma must be non-negative")

    def for_agent(self, i: int) -> "PerturbFn":
        return self.overrides.get(i, self)

    def table_for(self, i: int) -> np.ndarray:
        fn = self.for_agent(i)
        if fn.kind != "table-permutation":
            raise ConfigurationError("agent perturbation is not tabular")
        return fn.table[i] if len(fn.table) > 1 else fn.table[0]

    @property
    def differentiable(self) -> bool:
        """Whether ``df/db`` is available (identity for the offset kinds)."""
        return self.kind in ("linear-additive", "gaussian-additive", "laplace-additive", "nonoptimal-gaussian")

    def jacobian_b(self, dim: int) -> np.ndarray:
        if self.kind in ("uniform", "fixed-gaussian"):
            return np.zeros((dim, dim))
        if not self.differentiable:
            raise ConfigurationError(f"{self.kind} is not differentiable in b")
        return np.eye(dim)

    def apply(self, s, b, epsilon: float, rng: np.random.Generator | None = None, metric: str = "linf"):
        """Perturb a real-valued observation ``s`` with adversary output ``b``."""
        s = np.asarray(s, dtype=float)
        kind = self.kind
        if kind == "table-permutation":
            raise ConfigurationError("use perturb() for tabular models")
        if kind == "linear-additive":
            out = s + np.asarray(b, dtype=float)
        elif kind in ("gaussian-additive", "nonoptimal-gaussian"):
            out = s + np.asarray(b, dtype=float) + self.sigma * _rng(rng).standard_normal(s.shape)
        elif kind == "laplace-additive":
            out = s + np.asarray(b, dtype=float) + _rng(rng).laplace(0.0, self.sigma, s.shape)
        elif kind == "uniform":
            out = s + _rng(rng).uniform(-epsilon, epsilon, s.shape)
        else:  # fixed-gaussian
            out = s + self.sigma * _rng(rng).standard_normal(s.shape)
        if self.project:
            out = project_to_ball(s, out, epsilon, metric)
        return out


def _rng(rng):
    if rng is None:
        raise ConfigurationError("stochastic perturbation kinds need an rng")
    return rng


class StepResult(NamedTuple):
    b: tuple
    s_tilde: tuple
    a: tuple
    r: np.ndarray
    s_next: int


@dataclass(eq=False)
class MgSpaModel:
    """Finite MG-SPA with shared index conventions (see module docstring)."""

    agent_actions: tuple
    adversary_actions: tuple
    transition: np.ndarray
    rewards: np.ndarray
    perturb: PerturbFn
    gamma: float = 0.99
    epsilon: float = 1.0
    metric: str = "linf"
    state_names: tuple | None = None

    def __post_init__(self):
        self.agent_actions = tuple(int(n) for n in self.agent_actions)
        self.adversary_actions = tuple(int(n) for n in self.adversary_actions)
        N = len(self.agent_actions)
        if N == 0 or len(self.adversary_actions) != N:
            raise ConfigurationError("need one adversary per agent and at least one agent")
        if min(self.agent_actions + self.adversary_actions) < 1:
            raise ConfigurationError("action sets must be non-empty")
        P = np.array(self.transition, dtype=float)
        R = np.array(self.rewards, dtype=float)
        S = P.shape[0]
        nA, nB = math.prod(self.agent_actions), math.prod(self.adversary_actions)
        if S < 1 or P.shape != (S, nA, nB, S):
            raise ConfigurationError(f"transition must have shape {(S, nA, nB, S)}, got {P.shape}")
        if R.shape != (N, S, nA, nB):
            raise ConfigurationError(f"rewards must have shape {(N, S, nA, nB)}, got {R.shape}")
        if (P < 0).any() or np.abs(P.sum(-1) - 1.0).max() > 1e-12:
            raise ConfigurationError("transition rows must be probability vectors")
        if not np.isfinite(R).all():
            raise ConfigurationError("rewards must be finite")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if self.perturb.kind == "table-permutation":
            for i in range(N):
                t = self.perturb.table_for(i)
                if t.shape != (S, self.adversary_actions[i]):
                    raise ConfigurationError(f"perturbation table {i} must have shape {(S, self.adversary_actions[i])}")
                if t.min() < 0 or t.max() >= S:
                    raise ConfigurationError("perturbation table entries must be states")
        P.setflags(write=False)
        R.setflags(write=False)
        self.transition, self.rewards = P, R
        if self.state_names is not None:
            self.state_names = tuple(self.state_names)

    @property
    def n_agents(self) -> int:
        return len(self.agent_actions)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_joint_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_joint_perturbations(self) -> int:
        return self.transition.shape[2]

    @property
    def reward_bound(self) -> float:
        """``M = max |r|``, the bound of bounded-rewards assumption."""
        return float(np.abs(self.rewards).max())

    @property
    def shared_reward(self) -> bool:
        return bool((self.rewards == self.rewards[0]).all())

    def joint_action(self, a) -> int:
        return int(np.ravel_multi_index(tuple(a), self.agent_actions))

    def split_action(self, idx: int) -> tuple:
        return tuple(int(x) for x in np.unravel_index(idx, self.agent_actions))

    def joint_perturbation(self, b) -> int:
        return int(np.ravel_multi_index(tuple(b), self.adversary_actions))

    def split_perturbation(self, idx: int) -> tuple:
        return tuple(int(x) for x in np.unravel_index(idx, self.adversary_actions))

    def observation_table(self) -> np.ndarray:
        """``obs[s, b_joint, i]``: state observed by agent ``i``."""
        S, nB, N = self.n_states, self.n_joint_perturbations, self.n_agents
        out = np.empty((S, nB, N), dtype=int)
        for bj in range(nB):
            b = self.split_perturbation(bj)
            for i in range(N):
                out[:, bj, i] = self.perturb.table_for(i)[:, b[i]]
        return out

    def is_bijective(self) -> bool:
        """Every ``b -> f(s, b)`` is injective for each fixed ``s``."""
        for i in range(self.n_agents):
            t = self.perturb.table_for(i)
            if any(len(set(row.tolist())) != row.size for row in t):
                return False
        return True


@dataclass(eq=False)
class JointPolicy:
    """Tabular factorised policies.

    ``agent[i][s_tilde, a_i]`` is agent ``i``'s distribution given its observed
    state; ``adversary[i][s, b_i]`` is adversary ``i``'s distribution given the
    true state.
    """

    agent: list
    adversary: list

    def __post_init__(self):
        self.agent = [np.asarray(p, dtype=float) for p in self.agent]
        self.adversary = [np.asarray(p, dtype=float) for p in self.adversary]
        for p in self.agent + self.adversary:
            if (p < -1e-12).any() or np.abs(p.sum(-1) - 1.0).max() > 1e-9:
                raise ConfigurationError("policy rows must be probability vectors")

    def joint_adversary(self, model: MgSpaModel, s: int) -> np.ndarray:
        """Distribution over joint perturbations at true state ``s``."""
        out = np.ones(1)
        for p in self.adversary:
            out = np.outer(out, p[s]).ravel()
        return out

    def joint_agent(self, obs) -> np.ndarray:
        """Distribution over joint actions given per-agent observed states."""
        out = np.ones(1)
        for p, o in zip(self.agent, obs):
            out = np.outer(out, p[o]).ravel()
        return out


def uniform_policy(model: MgSpaModel) -> JointPolicy:
    S = model.n_states
    return JointPolicy(
        agent=[np.full((S, n), 1.0 / n) for n in model.agent_actions],
        adversary=[np.full((S, n), 1.0 / n) for n in model.adversary_actions],
    )


def build_toy_two_player(gamma: float = 0.99) -> MgSpaModel:
    """Two-player coordination game with two observation-flipping adversaries.

    At ``s0`` both players earn 1 when their actions match, at ``s1`` when they
    differ; the state switches exactly when the reward is earned. Adversary
    action 1 swaps the observed state, 0 leaves it alone.
    """
    S, nA, nB = 2, 4, 4
    P = np.zeros((S, nA, nB, S))
    r = np.zeros((S, nA, nB))
    for a1 in range(2):
        for a2 in range(2):
            a = a1 * 2 + a2
            same = a1 == a2
            r[0, a, :] = 1.0 if same else 0.0
            r[1, a, :] = 0.0 if same else 1.0
            # matching actions lead to s1 from either state
            P[:, a, :, 1 if same else 0] = 1.0
    table = np.array([[0, 1], [1, 0]])
    return MgSpaModel(
        agent_actions=(2, 2),
        adversary_actions=(2, 2),
        transition=P,
        rewards=np.stack([r, r]),
        perturb=PerturbFn("table-permutation", table=(table, table)),
        gamma=gamma,
        epsilon=1.0,
        state_names=("s0", "s1"),
    )


def toy_nash_policy(which: int = 1) -> JointPolicy:
    """Deterministic Nash policy of the unperturbed toy game.

    ``which=1``: player 1 always plays 1, player 2 plays 1 at ``s0`` and 0 at
    ``s1``; ``which=2`` swaps the roles of actions 0 and 1. Adversaries never
    perturb.
    """
    if which not in (1, 2):
        raise ConfigurationError("which must be 1 or 2")
    hi = 1 if which == 1 else 0
    p1 = np.zeros((2, 2))
    p1[:, hi] = 1.0
    p2 = np.zeros((2, 2))
    p2[0, hi] = 1.0
    p2[1, 1 - hi] = 1.0
    calm = np.array([[1.0, 0.0], [1.0, 0.0]])
    return JointPolicy([p1, p2], [calm, calm.copy()])


def flip_adversary(model: MgSpaModel, p: float) -> list:
    """Adversary tables that pick perturbation 1 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError("attack probability must lie in [0, 1]")
    out = []
    for nb in model.adversary_actions:
        if nb != 2:
            raise ConfigurationError("flip attack needs binary adversary actions")
        out.append(np.tile([1.0 - p, p], (model.n_states, 1)))
    return out


def perturb(model: MgSpaModel, s: int, b, rng: np.random.Generator | None = None) -> tuple:
    """Per-agent observed states ``f(s, b^i)`` for a tabular model."""
    b = tuple(b)
    if len(b) != model.n_agents:
        raise ConfigurationError("need one perturbation per adversary")
    out = []
    for i, bi in enumerate(b):
        if not 0 <= bi < model.adversary_actions[i]:
            raise ConfigurationError(f"adversary action {bi} out of range")
        out.append(int(model.perturb.table_for(i)[s, bi]))
    return tuple(out)


def step(model: MgSpaModel, s: int, policy: JointPolicy, rng: np.random.Generator) -> StepResult:
    """One interaction: adversaries perturb, agents act, the state moves."""
    b = tuple(int(rng.choice(n, p=p[s])) for n, p in zip(model.adversary_actions, policy.adversary))
    s_tilde = perturb(model, s, b)
    a = tuple(int(rng.choice(n, p=p[o])) for n, p, o in zip(model.agent_actions, policy.agent, s_tilde))
    aj, bj = model.joint_action(a), model.joint_perturbation(b)
    s_next = int(rng.choice(model.n_states, p=model.transition[s, aj, bj]))
    return StepResult(b, s_tilde, a, model.rewards[:, s, aj, bj].copy(), s_next)


def discounted_return(rewards, gamma: float):
    """``sum_t gamma^(t-1) r_t``; ``rewards`` is ``(T,)`` or ``(T, N)``."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        return np.zeros(r.shape[1:]) if r.ndim > 1 else 0.0
    disc = gamma ** np.arange(r.shape[0])
    return np.tensordot(disc, r, axes=(0, 0))


def policy_evaluation(model: MgSpaModel, policy: JointPolicy) -> np.ndarray:
    """Exact ``v^{pi,rho}`` as an ``(N, S)`` array via a linear solve."""
    S, N = model.n_states, model.n_agents
    obs = model.observation_table()
    P_d = np.zeros((S, S))
    r_d = np.zeros((N, S))
    for s in range(S):
        rho = policy.joint_adversary(model, s)
        for bj in np.nonzero(rho)[0]:
            pa = policy.joint_agent(obs[s, bj])
            w = rho[bj] * pa
            P_d[s] += w @ model.transition[s, :, bj]
            r_d[:, s] += model.rewards[:, s, :, bj] @ w
    A = np.eye(S) - model.gamma * P_d
    return np.linalg.solve(A, r_d.T).T


def model_to_dict(model: MgSpaModel) -> dict:
    pf = model.perturb

    def perturb_dict(fn: PerturbFn) -> dict:
        d = {"kind": fn.kind, "sigma": fn.sigma, "project": fn.project}
        if fn.table is not None:
            d["table"] = [t.tolist() for t in fn.table]
        return d

    out_pf = perturb_dict(pf)
    if pf.overrides:
        out_pf["overrides"] = {str(k): perturb_dict(v) for k, v in pf.overrides.items()}
    return {
        "states": list(model.state_names) if model.state_names else model.n_states,
        "actions": {"agents": list(model.agent_actions), "adversaries": list(model.adversary_actions)},
        "transition": model.transition.tolist(),
        "rewards": model.rewards.tolist(),
        "perturb": out_pf,
        "gamma": model.gamma,
        "epsilon": model.epsilon,
        "metric": model.metric,
    }


def model_from_dict(d: dict) -> MgSpaModel:
    known = {"states", "actions", "transition", "rewards", "perturb", "gamma", "epsilon", "metric"}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")

    def perturb_from(p: dict) -> PerturbFn:
        table = p.get("table")
        return PerturbFn(
            kind=p.get("kind", "table-permutation"),
            table=None if table is None else tuple(np.asarray(t, dtype=int) for t in table),
            sigma=float(p.get("sigma", 1.0)),
            project=bool(p.get("project", True)),
        )

    pf = perturb_from(d["perturb"])
    pf.overrides = {int(k): perturb_from(v) for k, v in d["perturb"].get("overrides", {}).items()}
    states = d["states"]
    return MgSpaModel(
        agent_actions=tuple(d["actions"]["agents"]),
        adversary_actions=tuple(d["actions"]["adversaries"]),
        transition=np.asarray(d["transition"], dtype=float),
        rewards=np.asarray(d["rewards"], dtype=float),
        perturb=pf,
        gamma=float(d["gamma"]),
        epsilon=float(d["epsilon"]),
        metric=d.get("metric", "linf"),
        state_names=tuple(states) if isinstance(states, list) else None,
    )


def save_model(model: MgSpaModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path) -> MgSpaModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def random_model(
    rng: np.random.Generator,
    n_states: int | None = None,
    agent_actions: Sequence[int] | None = None,
    adversary_actions: Sequence[int] | None = None,
    gamma: float | None = None,
    max_size: int = 3,
) -> MgSpaModel:
    """Random shared-reward two-agent model with bijective perturbation tables.

    Each adversary's table row ``f(s, .)`` is an injective map into ``S``
    drawn uniformly, so the model meets the bijectivity assumption.
    """
    S = int(n_states or rng.integers(2, max_size + 1))
    A = tuple(agent_actions or rng.integers(1, max_size + 1, size=2))
    B = tuple(adversary_actions or (int(rng.integers(1, S + 1)), int(rng.integers(1, S + 1))))
    tables = tuple(np.array([rng.permutation(S)[: B[i]] for _ in range(S)]) for i in range(len(A)))
    nA, nB = math.prod(A), math.prod(B)
    P = rng.random((S, nA, nB, S)) ** 3
    P /= P.sum(-1, keepdims=True)
    r = rng.uniform(-1.0, 1.0, (S, nA, nB))
    return MgSpaModel(
        agent_actions=A,
        adversary_actions=B,
        transition=P,
        rewards=np.stack([r] * len(A)),
        perturb=PerturbFn("table-permutation", table=tables),
        gamma=float(gamma if gamma is not None else rng.uniform(0.5, 0.95)),
        epsilon=float(S - 1),
    )

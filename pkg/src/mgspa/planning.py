"""Minimax Bellman operator and value iteration for tabular MG-SPAs.

States that can produce a common joint perturbed observation are
indistinguishable to the agents, so the operator solves one stage game per
*confusion class* (connected component of the "shares an observation"
relation) with a uniform chance root over the class, and assigns the class's
game value to each of its states. Each class value is a zero-sum game value,
hence monotone in ``v`` and shifts by ``gamma * c`` when ``v`` shifts by
``c``; the operator is therefore a sup-norm ``gamma``-contraction.

``information="state-revealing"`` instead solves one stage game per state
with that state as the only root branch (the perturbation is then powerless
because the agents can infer ``s``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConfigurationError, JointPolicy, MgSpaModel
from .stage import (
    SolveReport,
    StageGame,
    StageSolveError,
    extract_marginals,
    game_value,
    solve_zero_sum,
    stage_game_from_q,
)

__all__ = [
    "PlanningReport",
    "PlanningError",
    "INFORMATION_MODES",
    "confusion_classes",
    "q_from_v",
    "apply_minimax_operator",
    "class_values_from_q",
    "solve_operator_games",
    "value_iteration",
    "bellman_residual",
]

INFORMATION_MODES = ("pooled", "state-revealing")


class PlanningError(RuntimeError):
    def __init__(self, message: str, v_best=None, residual: float = float("nan")):
        super().__init__(message)
        self.v_best = v_best
        self.residual = residual


@dataclass(eq=False)
class PlanningReport:
    v_star: np.ndarray  # (N, S)
    residual: float
    iterations: int
    equilibrium_policy: JointPolicy
    residual_history: list = field(default_factory=list)
    stage_reports: list = field(default_factory=list)
    factorization_residual: float = 0.0


def confusion_classes(model: MgSpaModel, information: str = "pooled") -> list[tuple]:
    """Partition of the states into groups solved as one stage game."""
    if information not in INFORMATION_MODES:
        raise ConfigurationError(f"unknown information mode {information!r}")
    S = model.n_states
    if information == "state-revealing":
        return [(s,) for s in range(S)]
    parent = list(range(S))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner: dict = {}
    obs = model.observation_table()
    for s in range(S):
        for bj in range(obs.shape[1]):
            key = tuple(obs[s, bj].tolist())
            if key in owner:
                parent[find(s)] = find(owner[key])
            else:
                owner[key] = s
    groups: dict = {}
    for s in range(S):
        groups.setdefault(find(s), []).append(s)
    return [tuple(g) for g in sorted(groups.values())]


def _shared_v(model: MgSpaModel, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 2:
        v = v[0]
    if v.shape != (model.n_states,):
        raise ConfigurationError(f"value table must cover {model.n_states} states")
    return v


def q_from_v(model: MgSpaModel, v) -> np.ndarray:
    """Shared action values ``r + gamma * P v`` with shape ``(S, |A|, |B|)``."""
    if not model.shared_reward:
        raise ConfigurationError("planning needs a shared-reward model")
    return model.rewards[0] + model.gamma * model.transition @ _shared_v(model, v)


def class_values_from_q(model: MgSpaModel, q, classes) -> np.ndarray:
    """Per-state stage values of ``q`` under the given class partition."""
    out = np.empty(model.n_states)
    for cls in classes:
        out[list(cls)] = game_value(stage_game_from_q(model, q, cls))
    return out


def apply_minimax_operator(model: MgSpaModel, v, information: str = "pooled") -> np.ndarray:
    """``Lv`` as an ``(N, S)`` value table."""
    classes = confusion_classes(model, information)
    lv = class_values_from_q(model, q_from_v(model, v), classes)
    return np.tile(lv, (model.n_agents, 1))


def bellman_residual(model: MgSpaModel, v, information: str = "pooled") -> float:
    """``||Lv - v||_inf``."""
    v = _shared_v(model, v)
    return float(np.abs(apply_minimax_operator(model, v, information)[0] - v).max())


def solve_operator_games(model: MgSpaModel, q, information: str = "pooled", tol: float = 1e-7):
    """Fully solved stage games (with strategies) for every class of ``q``."""
    games: list[StageGame] = []
    reports: list[SolveReport] = []
    for cls in confusion_classes(model, information):
        g = stage_game_from_q(model, q, cls)
        games.append(g)
        reports.append(solve_zero_sum(g, tol=tol))
    return games, reports


def value_iteration(
    model: MgSpaModel,
    tol: float = 1e-6,
    max_iters: int = 100_000,
    v0=None,
    information: str = "pooled",
) -> PlanningReport:
    """Iterate ``v <- Lv`` until ``||Lv - v||_inf <= tol``.

    ``iterations`` counts applied updates; the final check reuses the next
    application, so a ``gamma = 0`` model finishes after one update. The
    attached policy comes from the stage games of the returned ``v`` solved
    at ``tol / 10``.
    """
    if not 0.0 <= model.gamma < 1.0:
        raise ConfigurationError("gamma must lie in [0, 1)")
    classes = confusion_classes(model, information)
    v = np.zeros(model.n_states) if v0 is None else _shared_v(model, v0).copy()
    history = []
    best_v, best_res = v.copy(), np.inf
    it = 0
    while True:
        lv = class_values_from_q(model, q_from_v(model, v), classes)
        res = float(np.abs(lv - v).max())
        history.append(res)
        if res < best_res:
            best_v, best_res = v.copy(), res
        if res <= tol:
            break
        if it >= max_iters:
            raise PlanningError(f"no convergence in {max_iters} iterations (residual {res:.3e})", best_v, best_res)
        v = lv
        it += 1
    try:
        games, reports = solve_operator_games(model, q_from_v(model, v), information, tol=max(tol / 10, 1e-9))
    except StageSolveError as exc:
        raise PlanningError(f"final stage solve failed: {exc}", v, res) from exc
    marg = extract_marginals(games, reports, model, tol=np.inf)
    return PlanningReport(
        v_star=np.tile(v, (model.n_agents, 1)),
        residual=res,
        iterations=it,
        equilibrium_policy=marg.policy,
        residual_history=history,
        stage_reports=reports,
        factorization_residual=marg.residual,
    )

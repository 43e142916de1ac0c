"""One-shot zero-sum stage games and their equilibria.

A stage game has a chance root over true states ``s`` (weights ``w``). The
perturber (P1, minimiser) sees ``s`` and picks a move ``m`` (a joint
perturbation, equivalently a joint perturbed state). The agent team (P2,
maximiser) sees only the information set ``info[s, m]`` (the joint perturbed
state) and picks a joint action ``a``. The payoff is ``payoff[s, m, a]``.

Behavioral strategies are ``lam[s, m]`` for P1 and ``chi[k, a]`` for P2.
"""
from __future__ import annotations

import itertools
import math
import warnings
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .model import ConfigurationError, JointPolicy, MgSpaModel
from .simplex import LPError, linprog, solve_matrix_game

log = logging.getLogger(__name__)

__all__ = [
    "StageGame",
    "BehavioralStrategy",
    "SolveReport",
    "StageSolveError",
    "Marginals",
    "SOLVE_METHODS",
    "build_stage_game",
    "stage_game_from_q",
    "solve_zero_sum",
    "game_value",
    "exploitability",
    "expected_payoff",
    "extract_marginals",
    "stage_game_to_dict",
    "stage_game_from_dict",
    "report_to_dict",
]

SOLVE_METHODS = ("sequence-form-lp", "normal-form-lp", "regret-selfplay")


class StageSolveError(RuntimeError):
    """Solver missed its tolerance; ``report`` holds the best strategies found."""

    def __init__(self, message: str, report: "SolveReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(eq=False)
class StageGame:
    payoff: np.ndarray  # (S, M, A)
    info: np.ndarray  # (S, M) -> infoset index
    state_weights: np.ndarray
    states: tuple = ()  # model state index of each root branch
    infosets: tuple = ()  # label of each P2 information set (joint s~)

    def __post_init__(self):
        self.payoff = np.asarray(self.payoff, dtype=float)
        self.info = np.asarray(self.info, dtype=int)
        self.state_weights = np.asarray(self.state_weights, dtype=float)
        S, M, A = self.payoff.shape
        if self.info.shape != (S, M):
            raise ConfigurationError("info must have shape (S, M)")
        if self.state_weights.shape != (S,) or (self.state_weights < 0).any():
            raise ConfigurationError("state_weights must be a non-negative vector over S")
        if abs(self.state_weights.sum() - 1.0) > 1e-12:
            raise ConfigurationError("state_weights must sum to 1")
        if not np.isfinite(self.payoff).all():
            raise ConfigurationError("payoff must be finite")
        if not self.states:
            self.states = tuple(range(S))
        n_info = int(self.info.max()) + 1
        if sorted(set(self.info.ravel().tolist())) != list(range(n_info)):
            raise ConfigurationError("every information set must be reachable")
        if not self.infosets:
            self.infosets = tuple(range(n_info))

    @property
    def n_states(self) -> int:
        return self.payoff.shape[0]

    @property
    def n_moves(self) -> int:
        return self.payoff.shape[1]

    @property
    def n_actions(self) -> int:
        return self.payoff.shape[2]

    @property
    def n_infosets(self) -> int:
        return len(self.infosets)

    @classmethod
    def from_matrix(cls, M) -> "StageGame":
        """Single-state game: rows are P2 actions (maximiser), columns P1 moves."""
        M = np.asarray(M, dtype=float)
        return cls(payoff=M.T[None], info=np.zeros((1, M.shape[1]), dtype=int), state_weights=np.ones(1))


@dataclass(eq=False)
class BehavioralStrategy:
    lam: np.ndarray  # (S, M)
    chi: np.ndarray  # (K, A)


@dataclass(eq=False)
class SolveReport:
    strategy: BehavioralStrategy
    game_value: float
    exploitability: float
    iterations: int
    method: str
    state_values: np.ndarray = field(default_factory=lambda: np.zeros(0))


class Marginals(NamedTuple):
    policy: JointPolicy
    residual: float


def stage_game_from_q(model: MgSpaModel, q, states=None, state_weights=None) -> StageGame:
    """Stage game whose payoff at ``(s, b, a)`` is ``q[s, a, b]``.

    ``q`` is a shared ``(S, |A|, |B|)`` table. ``states`` restricts the chance
    root to a subset (default all states); weights default to uniform.
    """
    if model.perturb.kind != "table-permutation":
        raise ConfigurationError("stage games need a tabular perturbation")
    if not model.is_bijective():
        raise ConfigurationError("perturbation is not a bijection in b; f_s^-1 undefined")
    q = np.asarray(q, dtype=float)
    states = tuple(range(model.n_states)) if states is None else tuple(int(s) for s in states)
    if state_weights is None:
        state_weights = np.full(len(states), 1.0 / len(states))
    obs = model.observation_table()[list(states)]  # (S', B, N)
    labels: dict = {}
    info = np.empty(obs.shape[:2], dtype=int)
    for si in range(obs.shape[0]):
        for m in range(obs.shape[1]):
            info[si, m] = labels.setdefault(tuple(int(x) for x in obs[si, m]), len(labels))
    payoff = np.transpose(q[list(states)], (0, 2, 1))
    return StageGame(payoff, info, np.asarray(state_weights, dtype=float), states, tuple(labels))


def build_stage_game(model: MgSpaModel, v, state_weights=None, states=None) -> StageGame:
    """Stage game with payoff ``r(s, a, b) + gamma * sum_s' p(s'|s,a,b) v(s')``."""
    if not model.shared_reward:
        raise ConfigurationError("stage games need a shared-reward model")
    v = np.asarray(v, dtype=float)
    if v.ndim == 2:
        v = v[0]
    q = model.rewards[0] + model.gamma * model.transition @ v
    return stage_game_from_q(model, q, states, state_weights)


def _chi_at(game: StageGame, chi: np.ndarray) -> np.ndarray:
    return chi[game.info]  # (S, M, A)


def state_payoffs(game: StageGame, strat: BehavioralStrategy) -> np.ndarray:
    """Expected payoff conditioned on each root state."""
    per_move = (_chi_at(game, strat.chi) * game.payoff).sum(-1)
    return (strat.lam * per_move).sum(-1)


def expected_payoff(game: StageGame, strat: BehavioralStrategy) -> float:
    return float(game.state_weights @ state_payoffs(game, strat))


def _incidence(game: StageGame) -> np.ndarray:
    """``H[(s, m), k] = 1`` when move ``m`` at ``s`` lands in infoset ``k``."""
    H = np.zeros((game.info.size, game.n_infosets))
    H[np.arange(game.info.size), game.info.ravel()] = 1.0
    return H


def _p2_counterfactual(game: StageGame, lam: np.ndarray, H: np.ndarray | None = None) -> np.ndarray:
    """``cf[k, a]``: payoff mass reaching infoset ``k`` times payoff of ``a``."""
    H = _incidence(game) if H is None else H
    W = game.state_weights[:, None] * lam
    contrib = (W[..., None] * game.payoff).reshape(-1, game.n_actions)
    return H.T @ contrib


def _best_response_values(game: StageGame, strat: BehavioralStrategy) -> tuple[float, float]:
    br2 = float(_p2_counterfactual(game, strat.lam).max(axis=1).sum())
    per_move = (_chi_at(game, strat.chi) * game.payoff).sum(-1)
    br1 = float(game.state_weights @ per_move.min(axis=1))
    return br2, br1


def exploitability(game: StageGame, strat: BehavioralStrategy) -> float:
    """Sum of both players' best-response gains; zero exactly at an equilibrium."""
    u = expected_payoff(game, strat)
    br2, br1 = _best_response_values(game, strat)
    return max(br2 - u, 0.0) + max(u - br1, 0.0)


def _normalise_rows(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, None)
    tot = x.sum(-1, keepdims=True)
    out = np.where(tot > 0, x / np.where(tot > 0, tot, 1.0), 1.0 / x.shape[-1])
    return out


def _p2_program(game: StageGame):
    """Sequence-form LP for the maximiser, as ``min c x`` data.

    Variables ``chi`` (K*A) then ``t`` (S), all non-negative because payoffs
    are assumed positive (see ``_rescaled``):
    max sum_s w_s t_s  s.t.  t_s <= chi[info(s,m)] . g[s,m]  for every (s, m),
    sum_a chi[k, a] = 1.
    """
    S, M, A = game.payoff.shape
    K = game.n_infosets
    nx = K * A
    nv = nx + S
    A_ub = np.zeros((S * M, nv))
    for s in range(S):
        for m in range(M):
            k = game.info[s, m]
            A_ub[s * M + m, k * A:(k + 1) * A] = -game.payoff[s, m]
            A_ub[s * M + m, nx + s] = 1.0
    A_eq = np.zeros((K, nv))
    for k in range(K):
        A_eq[k, k * A:(k + 1) * A] = 1.0
    c = np.zeros(nv)
    c[nx:] = -game.state_weights
    return c, A_ub, np.zeros(S * M), A_eq, np.ones(K), nx


def _p1_program(game: StageGame):
    """The minimiser's LP over realisation weights ``y[s, m]`` then ``z`` (K):
    min sum_k z_k  s.t.  z_k >= sum_{(s,m) in k} y[s,m] g[s,m,a]  for all k, a;
    sum_m y[s, m] = w_s.
    """
    S, M, A = game.payoff.shape
    K = game.n_infosets
    ny = S * M
    nv = ny + K
    A_ub = np.zeros((K * A, nv))
    for s in range(S):
        for m in range(M):
            k = game.info[s, m]
            A_ub[k * A:(k + 1) * A, s * M + m] = game.payoff[s, m]
    for k in range(K):
        A_ub[k * A:(k + 1) * A, ny + k] = -1.0
    A_eq = np.zeros((S, nv))
    for s in range(S):
        A_eq[s, s * M:(s + 1) * M] = 1.0
    c = np.zeros(nv)
    c[ny:] = 1.0
    return c, A_ub, np.zeros(K * A), A_eq, game.state_weights.copy(), ny


def _lam_from_weights(game: StageGame, y: np.ndarray) -> np.ndarray:
    S, M = game.n_states, game.n_moves
    y = np.clip(y[: S * M].reshape(S, M), 0.0, None)
    w = game.state_weights[:, None]
    return _normalise_rows(np.where(w > 0, y / np.where(w > 0, w, 1.0), 1.0))


def _refine(program, bound: float, scale=None):
    """Among solutions with objective ``<= bound``, maximise the smallest
    probability variable (``x_j >= scale_j * zeta``). Returns ``(x, iters)``.
    """
    c, A_ub, b_ub, A_eq, b_eq, n_prob = program
    nv = c.size
    scale = np.ones(n_prob) if scale is None else scale
    n2 = nv + 1
    cut = np.zeros((n_prob, n2))
    cut[np.arange(n_prob), np.arange(n_prob)] = -1.0
    cut[:, -1] = scale
    opt = np.zeros((1, n2))
    opt[0, :nv] = c
    A2 = np.vstack([np.hstack([A_ub, np.zeros((A_ub.shape[0], 1))]), cut, opt])
    b2 = np.concatenate([b_ub, np.zeros(n_prob), [bound]])
    A_eq2 = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))])
    c2 = np.zeros(n2)
    c2[-1] = -1.0
    res = linprog(c2, A2, b2, A_eq2, b_eq)
    return res.x[:nv], res.iterations


def _p2_solve(game: StageGame):
    """Plain LP: returns ``(chi, lam_from_duals, value, iters)``."""
    prog = _p2_program(game)
    c, A_ub, b_ub, A_eq, b_eq, nx = prog
    res = linprog(c, A_ub, b_ub, A_eq, b_eq)
    chi = _normalise_rows(res.x[:nx].reshape(game.n_infosets, game.n_actions))
    lam = _lam_from_weights(game, -res.duals_ub)
    return chi, lam, -res.fun, res.iterations


def game_value(game: StageGame) -> float:
    """Equilibrium value alone (unique, so no refinement is needed)."""
    if game.n_actions == 1:
        return float(game.state_weights @ game.payoff[..., 0].min(axis=1))
    scaled, shift, scale = _rescaled(game)
    if scale == 0.0:
        return shift
    return shift + scale * (_p2_solve(scaled)[2] - 2.0)


def _rescaled(game: StageGame) -> tuple[StageGame, float, float]:
    """Affine copy with payoffs in [1, 3]; strategies are unaffected.

    The original value is ``shift + scale * (value - 2)``. Positive payoffs
    keep every LP variable non-negative, avoiding split free variables.
    """
    lo, hi = float(game.payoff.min()), float(game.payoff.max())
    shift, scale = 0.5 * (lo + hi), 0.5 * (hi - lo)
    if scale <= 1e-13 * max(1.0, abs(shift)):
        return game, shift, 0.0
    g = StageGame((game.payoff - shift) / scale + 2.0, game.info, game.state_weights, game.states, game.infosets)
    return g, shift, scale


def _solve_sequence_lp(game: StageGame, refine: bool = True):
    """Equilibrium from one LP (P1 read off its duals), optionally refined to
    the most mixed optimal strategies; every candidate is certified and the
    refinement is kept only when it certifies no worse."""
    S, M, A = game.payoff.shape
    scaled, _, scale = _rescaled(game)
    if scale == 0.0:
        return BehavioralStrategy(np.full((S, M), 1.0 / M), np.full((game.n_infosets, A), 1.0 / A)), 0
    try:
        chi, lam, value, iters = _p2_solve(scaled)
    except LPError as exc:
        # rare singular bases on near-degenerate data; the normal form is an
        # independent LP over a different polytope
        log.debug("sequence-form LP failed (%s); trying the normal form", exc)
        try:
            return _solve_normal_form(game)
        except (LPError, StageSolveError):
            raise StageSolveError(f"sequence-form LP failed: {exc}") from exc
    best = BehavioralStrategy(lam, chi)
    if not refine:
        return best, iters
    slack = 1e-10 * max(1.0, abs(value))
    e_best = exploitability(scaled, best)
    try:
        if A > 1:
            p2 = _p2_program(scaled)
            x, it = _refine(p2, -value + slack)
            iters += it
            cand = BehavioralStrategy(best.lam, _normalise_rows(x[:p2[-1]].reshape(game.n_infosets, A)))
            e = exploitability(scaled, cand)
            if e <= max(e_best, slack):
                best, e_best = cand, e
        if M > 1:
            p1 = _p1_program(scaled)
            y, it = _refine(p1, value + slack, scale=np.repeat(scaled.state_weights, M))
            iters += it
            cand = BehavioralStrategy(_lam_from_weights(scaled, y), best.chi)
            e = exploitability(scaled, cand)
            if e <= max(e_best, slack):
                best, e_best = cand, e
    except LPError:
        pass
    return best, iters


_NORMAL_FORM_LIMIT = 40_000


def _solve_normal_form(game: StageGame):
    S, M, A = game.payoff.shape
    K = game.n_infosets
    n1, n2 = M ** S, A ** K
    if n1 * n2 > _NORMAL_FORM_LIMIT:
        raise StageSolveError(f"normal form too large ({n2} x {n1} pure strategies)")
    p1_maps = np.array(list(itertools.product(range(M), repeat=S))).reshape(n1, S)
    p2_maps = np.array(list(itertools.product(range(A), repeat=K))).reshape(n2, K)
    s_idx = np.arange(S)
    mat = np.zeros((n2, n1))
    for j, pm in enumerate(p1_maps):
        ks = game.info[s_idx, pm]  # infoset reached from each s
        g = game.payoff[s_idx, pm]  # (S, A)
        acts = p2_maps[:, ks]  # (n2, S)
        mat[:, j] = (g[s_idx, acts] * game.state_weights).sum(-1)
    _, x, y = solve_matrix_game(mat)
    chi = np.zeros((K, A))
    for k in range(K):
        np.add.at(chi[k], p2_maps[:, k], x)
    lam = np.zeros((S, M))
    for s in range(S):
        np.add.at(lam[s], p1_maps[:, s], y)
    return BehavioralStrategy(_normalise_rows(lam), _normalise_rows(chi)), 2


def _regret_matching(regret: np.ndarray) -> np.ndarray:
    pos = np.clip(regret, 0.0, None)
    return _normalise_rows(pos)


def _solve_regret(game: StageGame, tol: float, max_iter: int, check_every: int = 50):
    """CFR+ self-play with alternating updates and linear averaging."""
    S, M, A = game.payoff.shape
    K = game.n_infosets
    R1 = np.zeros((S, M))
    R2 = np.zeros((K, A))
    avg_lam = np.zeros((S, M))
    avg_chi = np.zeros((K, A))
    H = _incidence(game)
    best = None
    best_exp = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        lam = _regret_matching(R1)
        chi = _regret_matching(R2)
        # P2 (maximiser) update against current lam
        cf2 = _p2_counterfactual(game, lam, H)
        R2 = np.clip(R2 + cf2 - (cf2 * chi).sum(-1, keepdims=True), 0.0, None)
        chi = _regret_matching(R2)
        # P1 (minimiser) update against updated chi
        per_move = (_chi_at(game, chi) * game.payoff).sum(-1)
        cf1 = -game.state_weights[:, None] * per_move
        R1 = np.clip(R1 + cf1 - (cf1 * lam).sum(-1, keepdims=True), 0.0, None)
        avg_lam += it * lam
        avg_chi += it * chi
        if it % check_every == 0 or it == max_iter:
            strat = BehavioralStrategy(_normalise_rows(avg_lam), _normalise_rows(avg_chi))
            e = exploitability(game, strat)
            if e < best_exp:
                best, best_exp = strat, e
            if e <= tol:
                break
    return best, it


def solve_zero_sum(
    game: StageGame,
    tol: float = 1e-8,
    method: str = "sequence-form-lp",
    max_iter: int = 200_000,
    refine: bool = True,
) -> SolveReport:
    """Nash equilibrium of a stage game with an exploitability certificate.

    ``sequence-form-lp`` (default) solves one LP per player over behavioral
    strategies and, with ``refine``, picks the most mixed optimal strategy.
    ``normal-form-lp`` enumerates pure strategy maps (small games only).
    ``regret-selfplay`` runs CFR+ until the certificate drops below ``tol``.
    """
    if method not in SOLVE_METHODS:
        raise ConfigurationError(f"unknown solve method {method!r}")
    if method == "sequence-form-lp":
        strat, iters = _solve_sequence_lp(game, refine)
    elif method == "normal-form-lp":
        strat, iters = _solve_normal_form(game)
    else:
        strat, iters = _solve_regret(game, tol, max_iter)
    expl = exploitability(game, strat)
    report = SolveReport(
        strategy=strat,
        game_value=expected_payoff(game, strat),
        exploitability=expl,
        iterations=iters,
        method=method,
        state_values=state_payoffs(game, strat),
    )
    # LP certificates carry floating-point noise proportional to payoff scale
    slack = 0.0 if method == "regret-selfplay" else 1e-8 * max(1.0, float(np.abs(game.payoff).max()))
    if expl > tol + slack:
        raise StageSolveError(f"exploitability {expl:.3e} above tolerance {tol:.3e}", report)
    return report


def _marginal(chi_row: np.ndarray, sizes: tuple, i: int) -> np.ndarray:
    t = chi_row.reshape(sizes)
    axes = tuple(j for j in range(len(sizes)) if j != i)
    return t.sum(axis=axes)


def factorization_residual(chi: np.ndarray, sizes: tuple) -> float:
    """``max |chi - prod_i chi^i|`` over all information sets."""
    worst = 0.0
    for row in chi:
        prod = np.ones(1)
        for i in range(len(sizes)):
            prod = np.outer(prod, _marginal(row, sizes, i)).ravel()
        worst = max(worst, float(np.abs(row - prod).max()))
    return worst


def extract_marginals(games, reports, model: MgSpaModel, tol: float = 1e-6) -> Marginals:
    """Per-agent and per-adversary marginal policies of solved stage games.

    ``games``/``reports`` may be single objects or parallel lists (one per
    state class). Agent marginals at an observed state are averaged over the
    joint information sets containing it, weighted by their reach
    probability; unreached observations get the uniform policy. A warning is
    raised when the joint actor strategy is not a product of its marginals.
    """
    if isinstance(games, StageGame):
        games, reports = [games], [reports]
    S, N = model.n_states, model.n_agents
    A, B = model.agent_actions, model.adversary_actions
    num = [np.zeros((S, n)) for n in A]
    den = [np.zeros(S) for _ in A]
    adv = [np.full((S, n), 1.0 / n) for n in B]
    residual = 0.0
    for game, rep in zip(games, reports):
        strat = rep.strategy if isinstance(rep, SolveReport) else rep
        residual = max(residual, factorization_residual(strat.chi, A))
        W = game.state_weights[:, None] * strat.lam
        reach = np.zeros(game.n_infosets)
        np.add.at(reach, game.info.ravel(), W.ravel())
        mass = len(game.states) / S
        for k, label in enumerate(game.infosets):
            for i in range(N):
                o = label[i]
                num[i][o] += mass * reach[k] * _marginal(strat.chi[k], A, i)
                den[i][o] += mass * reach[k]
        for si, s in enumerate(game.states):
            for i in range(N):
                adv[i][s] = 0.0
                for m in range(game.n_moves):
                    b = np.unravel_index(m, B)
                    adv[i][s, b[i]] += strat.lam[si, m]
    agent = []
    for i in range(N):
        p = np.full((S, A[i]), 1.0 / A[i])
        seen = den[i] > 1e-15
        p[seen] = num[i][seen] / den[i][seen, None]
        agent.append(_normalise_rows(p))
    if residual > tol:
        warnings.warn(f"joint actor strategy does not factorise (residual {residual:.3g})", stacklevel=2)
    return Marginals(JointPolicy(agent=agent, adversary=[_normalise_rows(a) for a in adv]), residual)


def stage_game_to_dict(game: StageGame) -> dict:
    return {
        "payoff": game.payoff.tolist(),
        "info": game.info.tolist(),
        "state_weights": game.state_weights.tolist(),
        "states": list(game.states),
        "infosets": [list(x) if isinstance(x, tuple) else x for x in game.infosets],
    }


def stage_game_from_dict(d: dict) -> StageGame:
    unknown = set(d) - {"payoff", "info", "state_weights", "states", "infosets"}
    if unknown:
        raise ConfigurationError(f"unknown stage game keys: {sorted(unknown)}")
    payoff = np.asarray(d["payoff"], dtype=float)
    weights = d.get("state_weights")
    if weights is None:
        weights = np.full(payoff.shape[0], 1.0 / payoff.shape[0])
    infosets = tuple(tuple(x) if isinstance(x, list) else x for x in d.get("infosets", ()))
    return StageGame(payoff, np.asarray(d["info"], dtype=int), np.asarray(weights), tuple(d.get("states", ())), infosets)


def report_to_dict(rep: SolveReport) -> dict:
    return {
        "method": rep.method,
        "game_value": rep.game_value,
        "exploitability": rep.exploitability,
        "iterations": rep.iterations,
        "state_values": rep.state_values.tolist(),
        "lambda": rep.strategy.lam.tolist(),
        "chi": rep.strategy.chi.tolist(),
    }

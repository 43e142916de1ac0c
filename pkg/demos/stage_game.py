"""Solve one stage game of the toy model three ways and print the
equilibrium certificate of each.

    python3 demos/stage_game.py
"""
import numpy as np

from mgspa import build_toy_two_player
from mgspa.stage import build_stage_game, solve_zero_sum

model = build_toy_two_player(gamma=0.99)
game = build_stage_game(model, np.full(model.n_states, 50.0))
S, M, A = game.payoff.shape
print(f"states {S}, joint perturbations {M}, joint actions {A}")

for method, tol in (("sequence-form-lp", 1e-8), ("normal-form-lp", 1e-8), ("regret-selfplay", 1e-5)):
    rep = solve_zero_sum(game, tol=tol, method=method)
    print(f"\n{method}: value {rep.game_value:.6f}, exploitability {rep.exploitability:.1e}, {rep.iterations} iterations")
    print("  adversary (rows: states)\n", np.round(rep.strategy.lam, 3))
    print("  agents (rows: observed states)\n", np.round(rep.strategy.chi, 3))

"""Markov games with state perturbation adversaries: exact planning, robust
Q-learning, robust actor-critic and the experiment harness around them."""
from .model import (
    ConfigurationError,
    JointPolicy,
    MgSpaModel,
    PerturbFn,
    build_toy_two_player,
    random_model,
    toy_nash_policy,
)
from .planning import apply_minimax_operator, value_iteration
from .rmaac import RmaacConfig, train_rmaac
from .rmaq import train_rmaq
from .stage import StageGame, solve_zero_sum

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "JointPolicy",
    "MgSpaModel",
    "PerturbFn",
    "RmaacConfig",
    "StageGame",
    "apply_minimax_operator",
    "build_toy_two_player",
    "random_model",
    "solve_zero_sum",
    "toy_nash_policy",
    "train_rmaac",
    "train_rmaq",
    "value_iteration",
]

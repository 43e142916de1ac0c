"""Continuous cooperative-navigation environments.

Observation layout of ``ParticleEnv`` (per agent, 10 reals):

=======  ===========================================
index    content
=======  ===========================================
0-1      own position (x, y)
2-3      own velocity (x, y)
4-5      landmark 0 position minus own position
6-7      landmark 1 position minus own position
8-9      other agent position minus own position
=======  ===========================================

Physics per step (explicit Euler, unit mass, ``force = sensitivity * action``
with the action clamped to ``[-max_force, max_force]``):
``v' = (1 - damping) * v + dt * force`` then ``p' = p + dt * v'``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .model import ConfigurationError

__all__ = ["EnvState", "ParticleEnv", "ZeroRewardEnv", "ENV_REGISTRY", "make_env"]

log = logging.getLogger(__name__)


class EnvState(NamedTuple):
    pos: np.ndarray  # (N, 2)
    vel: np.ndarray  # (N, 2)
    landmarks: np.ndarray  # (L, 2)
    t: int


@dataclass(frozen=True)
class ParticleEnv:
    """Two agents must cover two landmarks without colliding; reward is shared."""

    n_agents: int = 2
    n_landmarks: int = 2
    horizon: int = 25
    damping: float = 0.25
    dt: float = 0.1
    max_force: float = 1.0
    sensitivity: float = 5.0
    collision_radius: float = 0.15
    collision_penalty: float = 1.0
    spawn_range: float = 1.0

    @property
    def obs_dim(self) -> int:
        return 4 + 2 * self.n_landmarks + 2 * (self.n_agents - 1)

    @property
    def act_dim(self) -> int:
        return 2

    def reset(self, rng: np.random.Generator) -> EnvState:
        r = self.spawn_range
        return EnvState(
            pos=rng.uniform(-r, r, (self.n_agents, 2)),
            vel=np.zeros((self.n_agents, 2)),
            landmarks=rng.uniform(-r, r, (self.n_landmarks, 2)),
            t=0,
        )

    def reward(self, state: EnvState) -> float:
        d = np.linalg.norm(state.landmarks[:, None, :] - state.pos[None, :, :], axis=-1)  # (L, N)
        rew = -float(d.min(axis=1).sum())
        for i in range(self.n_agents):
            for j in range(i + 1, self.n_agents):
                if np.linalg.norm(state.pos[i] - state.pos[j]) < self.collision_radius:
                    rew -= self.collision_penalty
        return rew

    def step(self, state: EnvState, actions) -> tuple[float, EnvState, bool]:
        """Advance one step; forces are clamped to ``[-max_force, max_force]``."""
        a = np.asarray(actions, dtype=float).reshape(self.n_agents, 2)
        clamped = np.clip(a, -self.max_force, self.max_force)
        n_out = int((clamped != a).sum())
        if n_out:
            log.debug("clamped %d action components", n_out)
        vel = (1.0 - self.damping) * state.vel + self.dt * self.sensitivity * clamped
        pos = state.pos + self.dt * vel
        nxt = EnvState(pos, vel, state.landmarks, state.t + 1)
        return self.reward(nxt), nxt, nxt.t >= self.horizon

    def observe(self, state: EnvState) -> np.ndarray:
        """Per-agent observations, shape ``(N, obs_dim)``."""
        obs = []
        for i in range(self.n_agents):
            p = state.pos[i]
            parts = [p, state.vel[i]]
            parts += [lm - p for lm in state.landmarks]
            parts += [state.pos[j] - p for j in range(self.n_agents) if j != i]
            obs.append(np.concatenate(parts))
        return np.stack(obs)


@dataclass(frozen=True)
class ZeroRewardEnv(ParticleEnv):
    """Same dynamics, reward identically zero."""

    def reward(self, state: EnvState) -> float:
        return 0.0


ENV_REGISTRY = {"particle-nav": ParticleEnv, "zero-reward": ZeroRewardEnv}


def make_env(name: str, **overrides) -> ParticleEnv:
    if name not in ENV_REGISTRY:
        raise ConfigurationError(f"unknown environment {name!r}; known: {sorted(ENV_REGISTRY)}")
    env = ENV_REGISTRY[name]()
    return replace(env, **overrides) if overrides else env

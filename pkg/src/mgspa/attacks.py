"""Observation-attack families used for robustness evaluation.

=======  ==============================  =========  ================
family   perturbed observation            adversary  projected to ball
=======  ==============================  =========  ================
none     s                                no         n/a
f1       s + b                            trained    yes
f2       s + Gaussian(b, sigma)           trained    yes
f3       s + Gaussian(b', sigma)          early ckpt yes
f4       s + Uniform(-eps, eps)           no         inside already
f5       s + Gaussian(0, sigma)           no         no
f6       s + Laplace(b, sigma)            trained    yes
=======  ==============================  =========  ================

``b`` is the trained adversary's output and ``b'`` the output of an
adversary checkpoint saved early in training.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ConfigurationError, PerturbFn

__all__ = ["AttackSpec", "ATTACK_FAMILIES", "apply_attack", "perturb_fn_for"]

# family -> (PerturbFn kind, needs adversary, projected)
ATTACK_FAMILIES = {
    "none": (None, False, False),
    "f1": ("linear-additive", True, True),
    "f2": ("gaussian-additive", True, True),
    "f3": ("nonoptimal-gaussian", True, True),
    "f4": ("uniform", False, True),
    "f5": ("fixed-gaussian", False, False),
    "f6": ("laplace-additive", True, True),
}
SOURCES = ("trained", "nonoptimal-checkpoint", "none")


@dataclass(frozen=True)
class AttackSpec:
    family: str = "f1"
    epsilon: float = 0.5
    sigma: float = 1.0
    source: str | None = None

    def __post_init__(self):
        if self.family not in ATTACK_FAMILIES:
            raise ConfigurationError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0 or self.sigma < 0:
            raise ConfigurationError("epsilon and sigma must be non-negative")
        src = self.source if self.source is not None else self.default_source
        if src not in SOURCES:
            raise ConfigurationError(f"unknown adversary source {src!r}")
        if self.needs_adversary and src == "none":
            raise ConfigurationError(f"family {self.family} needs an adversary source")
        object.__setattr__(self, "source", src)

    @property
    def needs_adversary(self) -> bool:
        return ATTACK_FAMILIES[self.family][1]

    @property
    def default_source(self) -> str:
        if self.family == "f3":
            return "nonoptimal-checkpoint"
        return "trained" if self.needs_adversary else "none"

    @property
    def label(self) -> str:
        return self.family if self.family in ("none", "f1", "f4") else f"{self.family}(sigma={self.sigma:g})"


def perturb_fn_for(spec: AttackSpec) -> PerturbFn | None:
    kind, _, projected = ATTACK_FAMILIES[spec.family]
    if kind is None:
        return None
    return PerturbFn(kind=kind, sigma=spec.sigma, project=projected)


def apply_attack(spec: AttackSpec, obs, adversary: Callable | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Perturbed observations for every agent; ``obs`` is ``(N, d)``.

    ``adversary`` maps the ``(N, d)`` true observations to ``(N, d)``
    perturbation outputs ``b``.
    """
    obs = np.asarray(obs, dtype=float)
    fn = perturb_fn_for(spec)
    if fn is None:
        return obs.copy()
    if spec.needs_adversary:
        if adversary is None:
            raise ConfigurationError(f"attack {spec.family} needs an adversary policy")
        b = np.asarray(adversary(obs), dtype=float)
    else:
        b = np.zeros_like(obs)
    return np.stack([fn.apply(obs[i], b[i], spec.epsilon, rng) for i in range(obs.shape[0])])

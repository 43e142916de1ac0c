"""Robust multi-agent actor-critic with deterministic policies.

Per agent ``i``:

* critic ``q^i(s, a, b)`` sees every agent's true observation, every action
  and every perturbation (centralised training);
* actor ``pi^i`` sees only its own perturbed observation ``f(s^i, b^i)``
  (optionally a stack of the ``h`` most recent ones);
* adversary ``rho^i`` sees agent ``i``'s true observation and outputs a
  perturbation inside the ``epsilon`` box (``epsilon * tanh``).

The adversary minimises the critic through two pathways: directly through
the ``b`` slot and through the actor, which reads the perturbed observation
(the ``reg`` term).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .model import ConfigurationError, PerturbFn, project_to_ball
from .nn import Adam, Mlp, Sgd, make_mlp, mlp_backward, mlp_forward

__all__ = [
    "RmaacConfig",
    "ReplayBuffer",
    "AgentBundle",
    "DivergenceError",
    "make_bundle",
    "frame_stack",
    "critic_gradient",
    "critic_update",
    "actor_gradient",
    "adversary_gradient",
    "apply_actor_update",
    "apply_adversary_update",
    "joint_gradients",
    "apply_joint_update",
    "soft_update",
    "train_rmaac",
    "act",
    "adversary_act",
    "stochastic_policy_gradients",
    "bundle_to_dict",
    "bundle_from_dict",
]

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class RmaacConfig:
    """Training hyperparameters; network and buffer sizes are desk-scale."""

    episodes: int = 2000
    gamma: float = 0.95
    tau: float = 0.01
    epsilon: float = 0.5
    lr_actor: float = 0.01
    lr_critic: float = 0.01
    lr_adversary: float = 0.005
    hidden: int = 32
    buffer_size: int = 100_000
    batch_size: int = 128
    iteration_steps: int = 20
    update_every: int = 25
    warmup: int = 500
    noise_start: float = 0.3
    noise_end: float = 0.05
    optimizer: str = "adam"
    history: int | None = None
    adversary: bool = True
    checkpoint_fraction: float = 0.1
    max_param_norm: float = 1e6

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.history is not None and self.history < 1:
            raise ConfigurationError("history must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")

    @classmethod
    def keys(cls) -> set:
        return {f.name for f in fields(cls)}


def frame_stack(observations, h: int) -> np.ndarray:
    """Concatenate the ``h`` most recent observations, newest first.

    ``observations`` is chronological (oldest first); missing history is
    padded with the earliest observation.
    """
    if h < 1:
        raise ConfigurationError("h must be >= 1")
    obs = list(observations)
    if not obs:
        raise ConfigurationError("need at least one observation")
    recent = obs[::-1][:h]
    recent += [obs[0]] * (h - len(recent))
    return np.concatenate([np.asarray(x, dtype=float) for x in recent], axis=-1)


class ReplayBuffer:
    """Ring buffer of transitions ``(s, a, b, s_tilde, r, s_next)``."""

    FIELDS = ("s", "a", "b", "s_tilde", "r", "s_next")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError("capacity must be positive")
        self.capacity = int(capacity)
        self._data: dict | None = None
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, **tr) -> None:
        if self._data is None:
            self._data = {k: np.zeros((self.capacity,) + np.shape(tr[k])) for k in self.FIELDS}
        for k in self.FIELDS:
            self._data[k][self._next] = tr[k]
        self._next = (self._next + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, k: int, rng: np.random.Generator) -> dict:
        """``k`` distinct records drawn uniformly."""
        if k > self.size:
            raise ConfigurationError(f"cannot sample {k} from {self.size} records")
        idx = rng.choice(self.size, size=k, replace=False)
        return {key: v[idx] for key, v in self._data.items()} | {"index": idx}


@dataclass(eq=False)
class AgentBundle:
    critics: list
    actors: list
    adversaries: list
    critic_targets: list
    actor_targets: list
    adversary_targets: list
    obs_dim: int
    act_dim: int
    gamma: float = 0.95
    tau: float = 0.01
    epsilon: float = 0.5
    history: int | None = None
    lr_actor: float = 0.01
    lr_critic: float = 0.01
    lr_adversary: float = 0.005
    adversary_enabled: bool = True
    perturb: PerturbFn = field(default_factory=lambda: PerturbFn("linear-additive"))
    optimizers: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return len(self.actors)

    @property
    def h(self) -> int:
        return 1 if self.history is None else self.history

    def live_nets(self) -> list:
        return self.critics + self.actors + self.adversaries

    def target_nets(self) -> list:
        return self.critic_targets + self.actor_targets + self.adversary_targets

    def max_param_norm(self) -> float:
        return max(net.norm() for net in self.live_nets())


def make_bundle(n_agents: int, obs_dim: int, act_dim: int, config: RmaacConfig, rng: np.random.Generator, max_action: float = 1.0) -> AgentBundle:
    H = config.hidden
    h = 1 if config.history is None else config.history
    crit_in = n_agents * (2 * obs_dim + act_dim)
    critics = [make_mlp([crit_in, H, H, 1], rng) for _ in range(n_agents)]
    actors = [make_mlp([h * obs_dim, H, H, act_dim], rng, "tanh", max_action) for _ in range(n_agents)]
    advs = [make_mlp([obs_dim, H, H, obs_dim], rng, "tanh", config.epsilon) for _ in range(n_agents)]
    opt = Adam if config.optimizer == "adam" else Sgd
    b = AgentBundle(
        critics=critics,
        actors=actors,
        adversaries=advs,
        critic_targets=[n.copy() for n in critics],
        actor_targets=[n.copy() for n in actors],
        adversary_targets=[n.copy() for n in advs],
        obs_dim=obs_dim,
        act_dim=act_dim,
        gamma=config.gamma,
        tau=config.tau,
        epsilon=config.epsilon,
        history=config.history,
        lr_actor=config.lr_actor,
        lr_critic=config.lr_critic,
        lr_adversary=config.lr_adversary,
        adversary_enabled=config.adversary,
    )
    b.optimizers = {
        "critic": [opt(config.lr_critic) for _ in range(n_agents)],
        "actor": [opt(config.lr_actor) for _ in range(n_agents)],
        "adversary": [opt(config.lr_adversary) for _ in range(n_agents)],
    }
    return b


# ---------------------------------------------------------------- helpers


def adversary_act(bundle: AgentBundle, i: int, obs_i: np.ndarray, target: bool = False) -> np.ndarray:
    """Perturbation ``b^i`` for a batch of agent ``i``'s true observations."""
    if not bundle.adversary_enabled:
        return np.zeros_like(obs_i)
    net = (bundle.adversary_targets if target else bundle.adversaries)[i]
    return mlp_forward(net, obs_i)


def _perturb(bundle: AgentBundle, s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Deterministic ``f(s, b) = proj(s + b)`` used inside the gradients."""
    return project_to_ball(s, s + b, bundle.epsilon)


def _f_jacobian_mask(bundle: AgentBundle, b: np.ndarray) -> np.ndarray:
    """Diagonal of ``d f / d b`` for the l_inf clamp (1 inside the box)."""
    return (np.abs(b) < bundle.epsilon).astype(float)


def _actor_input(bundle: AgentBundle, current: np.ndarray, stacked_prev: np.ndarray | None) -> np.ndarray:
    """Actor input with the current perturbed observation in the first slot.

    ``stacked_prev`` is the stored stack from the previous step (newest
    first); its oldest block drops off.
    """
    if bundle.history is None:
        return current
    d = bundle.obs_dim
    h = bundle.history
    if h == 1:
        return frame_stack([current], 1)
    return np.concatenate([current, stacked_prev[:, : (h - 1) * d]], axis=-1)


def _critic_input(s: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    K = s.shape[0]
    return np.concatenate([s.reshape(K, -1), a.reshape(K, -1), b.reshape(K, -1)], axis=1)


def _slices(bundle: AgentBundle, i: int):
    """Column slices of agent ``i``'s action and perturbation in the critic input."""
    N, d, k = bundle.n_agents, bundle.obs_dim, bundle.act_dim
    a0 = N * d + i * k
    b0 = N * d + N * k + i * d
    return slice(a0, a0 + k), slice(b0, b0 + d)


def act(bundle: AgentBundle, i: int, actor_input: np.ndarray, target: bool = False) -> np.ndarray:
    net = (bundle.actor_targets if target else bundle.actors)[i]
    return mlp_forward(net, actor_input)


# ---------------------------------------------------------------- gradients


def critic_targets(bundle: AgentBundle, batch: dict, i: int) -> np.ndarray:
    """``y = r^i + gamma q'^i(s', a', b')`` with target actors and adversaries."""
    s2 = batch["s_next"]
    K, N = s2.shape[:2]
    a2 = np.zeros(batch["a"].shape)
    b2 = np.zeros(batch["b"].shape)
    for j in range(N):
        b2[:, j] = adversary_act(bundle, j, s2[:, j], target=True)
        cur = _perturb(bundle, s2[:, j], b2[:, j])
        a2[:, j] = act(bundle, j, _actor_input(bundle, cur, batch["s_tilde"][:, j]), target=True)
    q2 = mlp_forward(bundle.critic_targets[i], _critic_input(s2, a2, b2))[:, 0]
    return batch["r"][:, i] + bundle.gamma * q2


def critic_gradient(bundle: AgentBundle, batch: dict, i: int) -> tuple[float, list]:
    """Mean squared TD loss of critic ``i`` and its parameter gradients."""
    y = critic_targets(bundle, batch, i)
    x = _critic_input(batch["s"], batch["a"], batch["b"])
    q = mlp_forward(bundle.critics[i], x)[:, 0]
    err = q - y
    K = err.size
    grads, _ = mlp_backward(bundle.critics[i], x, (2.0 / K) * err[:, None])
    return float(np.mean(err * err)), grads


def critic_update(bundle: AgentBundle, batch: dict, i: int) -> float:
    loss, grads = critic_gradient(bundle, batch, i)
    bundle.optimizers["critic"][i].step(bundle.critics[i].params, grads)
    return loss


def _policy_point(bundle: AgentBundle, batch: dict, i: int):
    """Critic input with ``b^i = rho^i(s^i)`` and ``a^i = pi^i(f(s^i, b^i))``."""
    s = batch["s"]
    b = batch["b"].copy()
    a = batch["a"].copy()
    bi = adversary_act(bundle, i, s[:, i])
    cur = _perturb(bundle, s[:, i], bi)
    x_act = _actor_input(bundle, cur, batch["s_tilde"][:, i])
    a[:, i] = act(bundle, i, x_act)
    b[:, i] = bi
    return _critic_input(s, a, b), x_act, bi


def actor_objective(bundle: AgentBundle, batch: dict, i: int) -> float:
    """``(1/K) sum_k q^i(s, a, b)`` at the policy point (for checks)."""
    x, _, _ = _policy_point(bundle, batch, i)
    return float(mlp_forward(bundle.critics[i], x).mean())


def actor_gradient(bundle: AgentBundle, batch: dict, i: int) -> list:
    """``(1/K) sum_k grad_theta pi^i(s~) grad_a q^i`` (ascent direction)."""
    x, x_act, _ = _policy_point(bundle, batch, i)
    K = x.shape[0]
    _, dx = mlp_backward(bundle.critics[i], x, np.full((K, 1), 1.0 / K))
    a_sl, _ = _slices(bundle, i)
    grads, _ = mlp_backward(bundle.actors[i], x_act, dx[:, a_sl])
    return grads


def adversary_gradient(bundle: AgentBundle, batch: dict, i: int, include_reg: bool = True) -> list:
    """``(1/K) sum_k grad_omega rho^i(s) [grad_b q^i + reg]`` (the adversary
    descends along it).

    ``reg = grad_a q^i  grad_s~ pi^i  grad_b f`` routes the perturbation
    through the actor. Only the newest block of a stacked actor input depends
    on the current perturbation.
    """
    if not bundle.adversary_enabled:
        return [np.zeros_like(p) for p in bundle.adversaries[i].params]
    x, x_act, bi = _policy_point(bundle, batch, i)
    K = x.shape[0]
    _, dx = mlp_backward(bundle.critics[i], x, np.full((K, 1), 1.0 / K))
    a_sl, b_sl = _slices(bundle, i)
    g_b = dx[:, b_sl].copy()
    if include_reg:
        if bundle.perturb.differentiable:
            _, d_in = mlp_backward(bundle.actors[i], x_act, dx[:, a_sl])
            d_cur = d_in[:, : bundle.obs_dim]
            g_b += d_cur * _f_jacobian_mask(bundle, bi)
        else:
            log.warning("perturbation %s is not differentiable in b; reg omitted", bundle.perturb.kind)
    s_i = batch["s"][:, i]
    grads, _ = mlp_backward(bundle.adversaries[i], s_i, g_b)
    return grads


def joint_gradients(bundle: AgentBundle, batch: dict, i: int) -> tuple[list, list]:
    """Actor and adversary gradients from one shared critic pass; equal to
    ``actor_gradient`` and ``adversary_gradient`` at the same parameters."""
    x, x_act, bi = _policy_point(bundle, batch, i)
    K = x.shape[0]
    _, dx = mlp_backward(bundle.critics[i], x, np.full((K, 1), 1.0 / K))
    a_sl, b_sl = _slices(bundle, i)
    g_actor, d_in = mlp_backward(bundle.actors[i], x_act, dx[:, a_sl])
    if not bundle.adversary_enabled:
        return g_actor, None
    g_b = dx[:, b_sl].copy()
    if bundle.perturb.differentiable:
        g_b += d_in[:, : bundle.obs_dim] * _f_jacobian_mask(bundle, bi)
    g_adv, _ = mlp_backward(bundle.adversaries[i], batch["s"][:, i], g_b)
    return g_actor, g_adv


def apply_joint_update(bundle: AgentBundle, batch: dict, i: int) -> None:
    """One iteration step: actor ascends and adversary descends, simultaneously."""
    g_actor, g_adv = joint_gradients(bundle, batch, i)
    bundle.optimizers["actor"][i].step(bundle.actors[i].params, [-g for g in g_actor])
    if g_adv is not None:
        bundle.optimizers["adversary"][i].step(bundle.adversaries[i].params, g_adv)


def adversary_objective(bundle: AgentBundle, batch: dict, i: int) -> float:
    """``(1/K) sum_k q^i(s, pi(f(s, rho(s))), rho(s))`` (for checks)."""
    return actor_objective(bundle, batch, i)


def apply_actor_update(bundle: AgentBundle, batch: dict, i: int) -> None:
    grads = actor_gradient(bundle, batch, i)
    bundle.optimizers["actor"][i].step(bundle.actors[i].params, [-g for g in grads])


def apply_adversary_update(bundle: AgentBundle, batch: dict, i: int) -> None:
    if not bundle.adversary_enabled:
        return
    grads = adversary_gradient(bundle, batch, i)
    bundle.optimizers["adversary"][i].step(bundle.adversaries[i].params, grads)


def soft_update(bundle: AgentBundle, tau: float | None = None) -> None:
    """``target <- tau * live + (1 - tau) * target`` for every network."""
    tau = bundle.tau if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError("tau must lie in [0, 1]")
    for live, tgt in zip(bundle.live_nets(), bundle.target_nets()):
        for p, q in zip(live.params, tgt.params):
            q *= 1.0 - tau
            q += tau * p


# ---------------------------------------------------------------- training


def _check_divergence(bundle: AgentBundle, limit: float) -> None:
    norm = bundle.max_param_norm()
    if not np.isfinite(norm) or norm > limit:
        raise DivergenceError(f"parameter norm {norm:.3g} exceeds {limit:.3g}")


def train_rmaac(env, config: RmaacConfig, seed: int = 0, bundle: AgentBundle | None = None, log_every: int = 0):
    """Algorithm-1 training loop.

    Returns ``(bundle, curve, checkpoint)`` where ``curve`` lists
    ``{"episode", "mean_episode_reward"}`` rows (reward summed over the
    episode, shared by all agents) and ``checkpoint`` is a copy of the
    adversary networks taken after ``checkpoint_fraction`` of the episodes
    (the non-optimal adversary used by attack f3).
    """
    rng = np.random.default_rng(seed)
    N, d, k = env.n_agents, env.obs_dim, env.act_dim
    bundle = bundle or make_bundle(N, d, k, config, rng, env.max_force)
    buf = ReplayBuffer(config.buffer_size)
    curve = []
    checkpoint = [n.copy() for n in bundle.adversaries]
    ckpt_ep = max(1, int(round(config.checkpoint_fraction * config.episodes)))
    total_steps = max(1, config.episodes * env.horizon)
    step_count = 0
    h = bundle.h
    for ep in range(config.episodes):
        state = env.reset(rng)
        s = env.observe(state)
        hist = [[] for _ in range(N)]
        ep_reward = 0.0
        done = False
        while not done:
            frac = min(1.0, step_count / total_steps)
            sigma = config.noise_start + (config.noise_end - config.noise_start) * frac
            b = np.zeros((N, d))
            x_act = np.zeros((N, h * d))
            a = np.zeros((N, k))
            for i in range(N):
                if bundle.adversary_enabled:
                    bi = adversary_act(bundle, i, s[i][None])[0]
                    bi = bi + sigma * config.epsilon * rng.standard_normal(d)
                    b[i] = np.clip(bi, -config.epsilon, config.epsilon)
                cur = project_to_ball(s[i], s[i] + b[i], config.epsilon)
                hist[i].append(cur)
                if bundle.history is None:
                    x_act[i] = cur
                else:
                    x_act[i] = frame_stack(hist[i][-h:], h)
                a[i] = act(bundle, i, x_act[i][None])[0] + sigma * rng.standard_normal(k)
            a = np.clip(a, -env.max_force, env.max_force)
            r, state, done = env.step(state, a)
            s2 = env.observe(state)
            buf.add(s=s, a=a, b=b, s_tilde=x_act, r=np.full(N, r), s_next=s2)
            ep_reward += r
            s = s2
            step_count += 1
            if len(buf) >= max(config.warmup, config.batch_size) and step_count % config.update_every == 0:
                for i in range(N):
                    batch = buf.sample(config.batch_size, rng)
                    critic_update(bundle, batch, i)
                    for _ in range(config.iteration_steps):
                        apply_joint_update(bundle, batch, i)
                soft_update(bundle)
                _check_divergence(bundle, config.max_param_norm)
        curve.append({"episode": ep + 1, "mean_episode_reward": ep_reward})
        if ep + 1 == ckpt_ep:
            checkpoint = [n.copy() for n in bundle.adversaries]
        if log_every and (ep + 1) % log_every == 0:
            log.info("episode %d reward %.3f", ep + 1, np.mean([c["mean_episode_reward"] for c in curve[-log_every:]]))
    return bundle, curve, checkpoint


# ---------------------------------------------------------------- stochastic


def stochastic_policy_gradients(actor: Mlp, adversary: Mlp, s, a, b, q, sigma_a: float, sigma_b: float, epsilon: float = np.inf):
    """Sample-average gradients for Gaussian policies with perturbation ``f1``.

    ``pi(a | s~) = N(mu_theta(s~), sigma_a^2 I)``, ``rho(b | s) = N(mu_omega(s),
    sigma_b^2 I)`` and ``s~ = s + b``. With ``q`` the critic values of the
    sampled ``(s, a, b)``:

    * ``g_theta = mean_k q_k grad_theta log pi(a_k | s~_k)``
    * ``g_omega = mean_k q_k [grad_omega log rho(b_k | s_k)
      + grad_s~ log pi(a_k | s~_k) grad_b f  J_k]``

    where ``J_k = d b_k / d omega`` for the reparameterised sample
    ``b = mu_omega(s) + sigma_b xi`` (equal to ``grad_omega mu_omega(s_k)``;
    rows index outputs, columns parameters).
    """
    s, a, b = (np.asarray(x, dtype=float) for x in (s, a, b))
    q = np.asarray(q, dtype=float).reshape(-1, 1)
    K = s.shape[0]
    s_t = project_to_ball(s, s + b, epsilon)
    mu_a = mlp_forward(actor, s_t)
    d_mu_a = (a - mu_a) / sigma_a**2  # d log pi / d mu_a
    g_theta, d_st = mlp_backward(actor, s_t, q * d_mu_a / K)
    mu_b = mlp_forward(adversary, s)
    d_mu_b = (b - mu_b) / sigma_b**2
    mask = (np.abs(b) < epsilon).astype(float)
    # both terms are linear in the upstream, so they share one backward pass
    g_omega, _ = mlp_backward(adversary, s, q * d_mu_b / K + d_st * mask)
    return g_theta, g_omega


# ---------------------------------------------------------------- checkpoints


def _net_dict(net: Mlp) -> dict:
    return {"params": [p.tolist() for p in net.params], "output": net.output, "out_scale": net.out_scale}


def _net_from(d: dict) -> Mlp:
    return Mlp([np.asarray(p, dtype=float) for p in d["params"]], d["output"], float(d["out_scale"]))


def bundle_to_dict(bundle: AgentBundle) -> dict:
    groups = ("critics", "actors", "adversaries", "critic_targets", "actor_targets", "adversary_targets")
    out = {g: [_net_dict(n) for n in getattr(bundle, g)] for g in groups}
    for key in ("obs_dim", "act_dim", "gamma", "tau", "epsilon", "history", "lr_actor", "lr_critic", "lr_adversary", "adversary_enabled"):
        out[key] = getattr(bundle, key)
    return out


def bundle_from_dict(d: dict, optimizer: str = "adam") -> AgentBundle:
    groups = ("critics", "actors", "adversaries", "critic_targets", "actor_targets", "adversary_targets")
    kw = {g: [_net_from(n) for n in d[g]] for g in groups}
    scalars = {k: d[k] for k in d if k not in groups}
    b = AgentBundle(**kw, **scalars)
    opt = Adam if optimizer == "adam" else Sgd
    b.optimizers = {
        "critic": [opt(b.lr_critic) for _ in range(b.n_agents)],
        "actor": [opt(b.lr_actor) for _ in range(b.n_agents)],
        "adversary": [opt(b.lr_adversary) for _ in range(b.n_agents)],
    }
    return b

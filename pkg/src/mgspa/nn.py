"""Small multilayer perceptrons with manual backpropagation, plus Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Mlp", "make_mlp", "mlp_forward", "mlp_backward", "Adam", "Sgd"]


@dataclass(eq=False)
class Mlp:
    """Feedforward net: ReLU hidden layers, linear or ``tanh`` output.

    ``params`` alternates weights ``(in, out)`` and biases ``(out,)``. A
    ``tanh`` head is multiplied by ``out_scale``.
    """

    params: list
    output: str = "linear"
    out_scale: float = 1.0

    @property
    def sizes(self) -> list[int]:
        return [self.params[0].shape[0]] + [W.shape[1] for W in self.params[0::2]]

    def copy(self) -> "Mlp":
        return Mlp([p.copy() for p in self.params], self.output, self.out_scale)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        k = 0
        for p in self.params:
            p[...] = vec[k:k + p.size].reshape(p.shape)
            k += p.size

    def norm(self) -> float:
        return float(np.sqrt(sum(float((p * p).sum()) for p in self.params)))


def make_mlp(sizes, rng: np.random.Generator, output: str = "linear", out_scale: float = 1.0, last_init: float | None = 3e-3) -> Mlp:
    """Fan-in uniform initialisation; the last layer uses ``+-last_init``."""
    if output not in ("linear", "tanh"):
        raise ValueError(f"unknown output {output!r}")
    params = []
    n = len(sizes) - 1
    for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = last_init if (k == n - 1 and last_init is not None) else 1.0 / np.sqrt(i)
        params.append(rng.uniform(-bound, bound, (i, o)))
        params.append(rng.uniform(-bound, bound, o))
    return Mlp(params, output, out_scale)


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.params[0].shape[0]:
        raise ValueError(f"expected input of shape (batch, {net.params[0].shape[0]}), got {x.shape}")
    return x


def _forward(net: Mlp, x: np.ndarray):
    acts = [x]
    h = x
    n = len(net.params) // 2
    for k in range(n):
        z = h @ net.params[2 * k] + net.params[2 * k + 1]
        h = np.maximum(z, 0.0) if k < n - 1 else z
        acts.append(h)
    if net.output == "tanh":
        t = np.tanh(h)
        return net.out_scale * t, acts, t
    return h, acts, None


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Outputs for a batch ``x`` of shape ``(batch, in)``."""
    return _forward(net, _check_input(net, x))[0]


def mlp_backward(net: Mlp, x, upstream) -> tuple[list, np.ndarray]:
    """Gradients of ``sum(upstream * mlp_forward(net, x))``.

    Returns ``(param_grads, input_grad)``; ``param_grads`` matches
    ``net.params`` shape by shape.
    """
    x = _check_input(net, x)
    y, acts, t = _forward(net, x)
    g = np.asarray(upstream, dtype=float)
    if g.shape != y.shape:
        raise ValueError(f"upstream shape {g.shape} does not match output {y.shape}")
    if t is not None:
        g = g * net.out_scale * (1.0 - t * t)
    n = len(net.params) // 2
    grads = [None] * len(net.params)
    for k in reversed(range(n)):
        h_in = acts[k]
        grads[2 * k] = h_in.T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ net.params[2 * k].T
        if k > 0:
            g = g * (acts[k] > 0.0)
    return grads, g


@dataclass(eq=False)
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list, grads: list) -> None:
        """Descent step ``params -= lr * adam(grads)`` in place."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(eq=False)
class Sgd:
    lr: float

    def step(self, params: list, grads: list) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g

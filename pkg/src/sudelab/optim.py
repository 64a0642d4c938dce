"""First-order optimizers over engine parameters.

Both keep their state keyed by parameter name so they can be checkpointed
alongside the weights.  ``clip`` bounds the global gradient norm per step.
"""
from __future__ import annotations

import numpy as np

from . import engine as E


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    k = max_norm / norm
    return [g * k for g in grads], norm


class Optimizer:
    def __init__(self, params: list[E.Array], lr: float, clip: float | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if len({id(p) for p in params}) != len(params):
            raise ValueError("duplicate parameters")
        self.params = list(params)
        self.lr = float(lr)
        self.clip = clip
        self.last_norm = 0.0

    def step(self, loss: E.Array) -> None:
        grads = E.grad(loss, self.params)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise FloatingPointError("non-finite gradient")
        grads, self.last_norm = clip_global_norm(grads, self.clip)
        for i, (p, g) in enumerate(zip(self.params, grads)):
            p.value = p.value - self._update(i, g)

    def _update(self, i: int, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip: float | None = None):
        super().__init__(params, lr, clip)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def _update(self, i, g):
        v = self.velocity[i]
        v *= self.momentum
        v += g
        return self.lr * v


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = None):
        super().__init__(params, lr, clip)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, loss):
        self.t += 1
        super().step(loss)

    def _update(self, i, g):
        m, v = self.m[i], self.v[i]
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        mhat = m / (1 - self.b1**self.t)
        vhat = v / (1 - self.b2**self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(name: str, params, lr: float, clip: float | None = None) -> Optimizer:
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}") from None
    return cls(params, lr, clip=clip)

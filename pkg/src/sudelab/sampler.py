"""Ancestral (DDPM) and deterministic (DDIM) reverse-process sampling.

Any object with ``schedule`` and ``predict_mean(x_t, cond, t, branch=...)`` can
be sampled: the trained :class:`~sudelab.denoiser.Denoiser` or the exact
:class:`~sudelab.oracle.DiracWorld`.

Randomness comes from a Philox counter generator keyed by
``(seed, trajectory)`` with the step in the counter, so every trajectory is
reproducible on its own regardless of batching or execution order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedule import mean_to_eps

_INIT_STEP = 2**32 - 1  # counter slot used for the x_T draw


def step_rng(seed: int, index: int, step: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, index], dtype=np.uint64)
    counter = np.array([0, 0, step, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "value", x), dtype=np.float64)


def _mean(denoiser, x_t, cond, t) -> np.ndarray:
    return _values(denoiser.predict_mean(x_t, cond, t, branch="frozen"))


def ddpm_step(denoiser, x_t, t: int, cond, noise) -> np.ndarray:
    sched = denoiser.schedule
    t = sched.check_step(t)
    mean = _mean(denoiser, x_t, cond, t)
    if t == 1:
        return mean
    return mean + sched.sigma[t] * np.asarray(noise, dtype=np.float64)


def ddim_plan(T: int, steps: int) -> list[int]:
    """Decreasing, evenly spaced steps starting at T; ends at 1 when steps > 1."""
    if not (1 <= steps <= T):
        raise ValueError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    if steps == 1:
        return [T]
    plan = np.round(np.linspace(T, 1, steps)).astype(int)
    return [int(t) for t in plan]


def ddim_step(denoiser, x_t, t_from: int, t_to: int, cond, eta: float = 0.0,
              noise=None) -> np.ndarray:
    sched = denoiser.schedule
    if not (t_from > t_to >= 0):
        raise ValueError(f"need t_from > t_to >= 0, got {t_from} -> {t_to}")
    if not (0.0 <= eta <= 1.0):
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    sched.check_step(t_from)
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = _mean(denoiser, x_t, cond, t_from)
    eps = mean_to_eps(x_t, mean, t_from, sched)
    ab_f, ab_to = sched.alpha_bar[t_from], sched.alpha_bar[t_to]
    x0 = (x_t - np.sqrt(1.0 - ab_f) * eps) / np.sqrt(ab_f)
    if t_to == 0:
        return x0
    var = eta**2 * (1.0 - ab_to) / (1.0 - ab_f) * (1.0 - ab_f / ab_to)
    out = np.sqrt(ab_to) * x0 + np.sqrt(max(1.0 - ab_to - var, 0.0)) * eps
    if var > 0:
        if noise is None:
            raise ValueError("eta > 0 needs a noise draw")
        out = out + np.sqrt(var) * np.asarray(noise, dtype=np.float64)
    return out


@dataclass
class SampleTrajectory:
    seed: int
    index: int
    steps: list[int]
    final: np.ndarray
    states: list[np.ndarray] = field(default_factory=list)


def _noise(seed: int, indices, step: int, dim: int) -> np.ndarray:
    return np.stack([step_rng(seed, i, step).standard_normal(dim) for i in indices])


def sample_trajectories(denoiser, cond, method: str = "ddim", steps: int = 50, eta: float = 0.0,
                        seed: int = 0, count: int = 4, indices=None, dim: int | None = None,
                        keep_states: bool = False) -> list[SampleTrajectory]:
    if count < 1:
        raise ValueError("count must be >= 1")
    sched = denoiser.schedule
    T = sched.T
    if dim is None:
        dim = denoiser.dims.d_x if hasattr(denoiser, "dims") else denoiser.dim
    indices = list(range(count)) if indices is None else list(indices)
    x = _noise(seed, indices, _INIT_STEP, dim)
    states = [x.copy()] if keep_states else []
    if method == "ddpm":
        plan = list(range(T, 0, -1))
        for t in plan:
            x = ddpm_step(denoiser, x, t, cond, _noise(seed, indices, t, dim) if t > 1 else 0.0)
            if keep_states:
                states.append(x.copy())
    elif method == "ddim":
        plan = ddim_plan(T, steps)
        targets = plan[1:] + [0]
        for t_from, t_to in zip(plan, targets):
            noise = _noise(seed, indices, t_from, dim) if (eta > 0 and t_to > 0) else None
            x = ddim_step(denoiser, x, t_from, t_to, cond, eta, noise)
            if keep_states:
                states.append(x.copy())
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return [SampleTrajectory(seed, idx, plan, x[i].copy(),
                             [s[i].copy() for s in states] if keep_states else [])
            for i, idx in enumerate(indices)]


def sample(denoiser, cond, method: str = "ddim", steps: int = 50, eta: float = 0.0,
           seed: int = 0, count: int = 4, **kw) -> list[np.ndarray]:
    return [tr.final for tr in sample_trajectories(denoiser, cond, method, steps, eta, seed, count, **kw)]

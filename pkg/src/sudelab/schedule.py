"""Linear-beta noise schedule, closed-form forward noising and posterior std."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray       # index 1..T; beta[0] is unused (0)
    alpha_bar: np.ndarray  # index 0..T; alpha_bar[0] == 1
    sigma: np.ndarray      # index 1..T; sigma[0] is unused
    sigma_min: float = SIGMA_MIN

    def check_step(self, t, allow_zero: bool = False):
        """Validate a step (int) or a vector of per-row steps (int array)."""
        lo = 0 if allow_zero else 1
        arr = np.asarray(t)
        if arr.ndim == 0:
            if not (lo <= int(arr) <= self.T):
                raise ValueError(f"step {int(arr)} outside [{lo}, {self.T}]")
            return int(arr)
        if arr.size and (arr.min() < lo or arr.max() > self.T):
            raise ValueError(f"steps outside [{lo}, {self.T}]: {arr.min()}..{arr.max()}")
        return arr.astype(np.int64)

    def column(self, table: np.ndarray, t):
        """table[t] as a scalar, or as a (batch, 1) column for per-row steps."""
        v = table[t]
        return float(v) if np.ndim(v) == 0 else v[:, None]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "sigma_min": self.sigma_min}


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.05,
                  sigma_min: float = SIGMA_MIN) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if sigma_min <= 0:
        raise ValueError("sigma_min must be positive")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.ones(T + 1)
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t])
    sigma = np.zeros(T + 1)
    var = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    sigma[1:] = np.maximum(sigma_min, np.sqrt(var))
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha_bar, sigma, float(sigma_min))


def forward_noise(x0, eps, t, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t = schedule.check_step(t, allow_zero=True)
    ab = schedule.column(schedule.alpha_bar, t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_sigma(t: int, schedule: NoiseSchedule) -> float:
    return float(schedule.sigma[schedule.check_step(t)])


def posterior_coefficients(t, schedule: NoiseSchedule):
    """(c0, ct) with E[x_{t-1} | x_t, x_0] = c0 * x_0 + ct * x_t."""
    t = schedule.check_step(t)
    ab = schedule.column(schedule.alpha_bar, t)
    ab_prev = schedule.column(schedule.alpha_bar, np.asarray(t) - 1)
    b = schedule.column(schedule.beta, t)
    c0 = np.sqrt(ab_prev) * b / (1.0 - ab)
    ct = np.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    return c0, ct


def posterior_mean(x0, x_t, t, schedule: NoiseSchedule) -> np.ndarray:
    c0, ct = posterior_coefficients(t, schedule)
    return c0 * np.asarray(x0, dtype=np.float64) + ct * np.asarray(x_t, dtype=np.float64)


def eps_to_mean(x_t, eps, t, schedule: NoiseSchedule):
    """Posterior mean implied by a noise estimate; works on engine Arrays too."""
    t = schedule.check_step(t)
    b = schedule.column(schedule.beta, t)
    ab = schedule.column(schedule.alpha_bar, t)
    return (x_t - eps * (b / np.sqrt(1.0 - ab))) * (1.0 / np.sqrt(1.0 - b))


def mean_to_eps(x_t, mean, t, schedule: NoiseSchedule) -> np.ndarray:
    t = schedule.check_step(t)
    b = schedule.column(schedule.beta, t)
    ab = schedule.column(schedule.alpha_bar, t)
    return (np.asarray(x_t) - np.sqrt(1.0 - b) * np.asarray(mean)) * np.sqrt(1.0 - ab) / b

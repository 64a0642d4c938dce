"""Closed-form ground truth in a world where every condition is a single point.

In this world the reverse conditional ``p(x_{t-1} | x_t, c)`` is exactly the
forward posterior, a Gaussian with std ``sigma_t``.  That makes the implicit
classifier of a conditional denoiser computable two independent ways:

* revealed:  ``log p(k | x_t) - ||x_{t-1} - mean_k(x_t)||^2 / (2 sigma_t^2)``
* joint:     ``log prior_k + log q(x_{t-1} | x0_k) + log q(x_t | x_{t-1})``

and the two must agree.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule, posterior_coefficients, posterior_mean

NULL_LABEL = "null"


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    return logits - logsumexp(logits)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, var: float) -> float:
    x, mean = np.asarray(x, dtype=np.float64), np.asarray(mean, dtype=np.float64)
    d = x.size
    return float(-0.5 * np.sum((x - mean) ** 2) / var - 0.5 * d * np.log(2 * np.pi * var))


def condition_gaussian(mean: np.ndarray, cov: np.ndarray, given: Sequence[int],
                       value: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the free block of a joint Gaussian given the rest."""
    mean, cov = np.asarray(mean, float), np.asarray(cov, float)
    given = np.asarray(given)
    free = np.setdiff1d(np.arange(mean.size), given)
    s_ff = cov[np.ix_(free, free)]
    s_fg = cov[np.ix_(free, given)]
    s_gg = cov[np.ix_(given, given)]
    k = np.linalg.solve(s_gg, s_fg.T).T
    m = mean[free] + k @ (np.asarray(value, float) - mean[given])
    c = s_ff - k @ s_fg.T
    return m, c


def two_step_joint(x0: float, t: int, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Joint Gaussian of (x_{t-1}, x_t) given scalar x0, built from the chain."""
    ab_prev = schedule.alpha_bar[t - 1]
    b = schedule.beta[t]
    v1 = 1.0 - ab_prev
    a = np.sqrt(1.0 - b)
    mean = np.array([np.sqrt(ab_prev) * x0, a * np.sqrt(ab_prev) * x0])
    cov = np.array([[v1, a * v1], [a * v1, a * a * v1 + b]])
    return mean, cov


@dataclass
class DiracWorld:
    anchors: dict[Hashable, np.ndarray]
    prior: dict[Hashable, float]
    schedule: NoiseSchedule
    _labels: list = field(init=False, repr=False)

    def __post_init__(self):
        self.anchors = {k: np.asarray(v, dtype=np.float64) for k, v in self.anchors.items()}
        self._labels = list(self.anchors)
        if NULL_LABEL in self.anchors:
            raise ValueError(f"{NULL_LABEL!r} is reserved for the unconditional mixture")
        if set(self.prior) != set(self.anchors):
            raise ValueError("prior and anchors must share labels")
        p = np.array([self.prior[k] for k in self._labels])
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("priors must be positive and sum to 1")
        pts = np.stack([self.anchors[k] for k in self._labels])
        if len(pts) > 1:
            d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
            if d[~np.eye(len(pts), dtype=bool)].min() <= 0:
                raise ValueError("anchors must be pairwise distinct")

    @classmethod
    def random(cls, n: int, dim: int, schedule: NoiseSchedule, rng: np.random.Generator,
               spread: float = 1.0) -> "DiracWorld":
        anchors = {f"c{i}": rng.normal(0.0, spread, dim) for i in range(n)}
        w = rng.uniform(0.5, 1.5, n)
        w = w / w.sum()
        prior = {f"c{i}": float(w[i]) for i in range(n)}
        # renormalise exactly
        total = sum(prior.values())
        prior = {k: v / total for k, v in prior.items()}
        return cls(anchors, prior, schedule)

    @property
    def labels(self) -> list:
        return list(self._labels)

    @property
    def dim(self) -> int:
        return next(iter(self.anchors.values())).size

    def _check(self, c) -> None:
        if c != NULL_LABEL and c not in self.anchors:
            raise KeyError(f"unknown condition {c!r}")

    # -- class posteriors ------------------------------------------------

    def bayes_log_posterior(self, x, t_level: int, candidates: Sequence | None = None) -> np.ndarray:
        cands = list(candidates) if candidates is not None else self.labels
        if not cands:
            raise ValueError("candidates must be non-empty")
        for c in cands:
            self._check(c)
        x = np.asarray(x, dtype=np.float64)
        ab = self.schedule.alpha_bar[t_level]
        logp = np.log([self.prior[c] for c in cands])
        if 1.0 - ab <= 0.0:
            d = np.array([np.sum((x - self.anchors[c]) ** 2) for c in cands])
            hit = d == d.min()
            return np.where(hit, logp, -np.inf) - logsumexp(np.where(hit, logp, -np.inf))
        ll = np.array([gaussian_logpdf(x, np.sqrt(ab) * self.anchors[c], 1.0 - ab) for c in cands])
        return _log_softmax(logp + ll)

    def bayes_posterior(self, x, t_level: int, candidates: Sequence | None = None) -> np.ndarray:
        return np.exp(self.bayes_log_posterior(x, t_level, candidates))

    # -- denoising -------------------------------------------------------

    def exact_mean(self, x_t, c, t: int) -> np.ndarray:
        """E[x_{t-1} | x_t, c]; the null condition mixes anchors by their posterior."""
        self._check(c)
        x_t = np.asarray(x_t, dtype=np.float64)
        if c != NULL_LABEL:
            return posterior_mean(self.anchors[c], x_t, t, self.schedule)
        if x_t.ndim == 2:
            return self._null_mean_batch(x_t, t)
        w = self.bayes_posterior(x_t, t)
        means = np.stack([posterior_mean(self.anchors[k], x_t, t, self.schedule) for k in self._labels])
        return w @ means

    def _null_mean_batch(self, x_t: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar[t]
        pts = np.stack([self.anchors[k] for k in self._labels])
        logp = np.log([self.prior[k] for k in self._labels])
        sq = ((x_t[:, None, :] - np.sqrt(ab) * pts[None]) ** 2).sum(-1)
        logits = logp[None] - 0.5 * sq / (1.0 - ab)
        w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        c0, ct = posterior_coefficients(t, self.schedule)
        return c0 * (w @ pts) + ct * x_t

    def predict_mean(self, x_t, cond, t, branch: str = "live") -> np.ndarray:
        """Denoiser protocol used by the samplers."""
        t = self.schedule.check_step(t)
        x_t = np.asarray(x_t, dtype=np.float64)
        if np.ndim(t) and cond == NULL_LABEL:
            return np.stack([self.exact_mean(x_t[i], cond, int(t[i])) for i in range(len(x_t))])
        return self.exact_mean(x_t, cond, t)

    def revealed_log_posterior(self, x_t, x_prev, t: int, candidates: Sequence | None = None) -> np.ndarray:
        cands = list(candidates) if candidates is not None else self.labels
        sigma = self.schedule.sigma[self.schedule.check_step(t)]
        log_c = self.bayes_log_posterior(x_t, t, cands)
        x_prev = np.asarray(x_prev, dtype=np.float64)
        sq = np.array([np.sum((x_prev - self.exact_mean(x_t, k, t)) ** 2) for k in cands])
        return _log_softmax(log_c - sq / (2.0 * sigma * sigma))

    def revealed_posterior(self, x_t, x_prev, t: int, candidates: Sequence | None = None) -> np.ndarray:
        return np.exp(self.revealed_log_posterior(x_t, x_prev, t, candidates))

    def joint_posterior(self, x_prev, x_t, t: int, candidates: Sequence | None = None) -> np.ndarray:
        """p(k | x_{t-1}, x_t) by factorising the forward joint density directly."""
        cands = list(candidates) if candidates is not None else self.labels
        t = self.schedule.check_step(t)
        ab_prev, b = self.schedule.alpha_bar[t - 1], self.schedule.beta[t]
        x_prev = np.asarray(x_prev, dtype=np.float64)
        x_t = np.asarray(x_t, dtype=np.float64)
        logp = np.log([self.prior[c] for c in cands])
        trans = gaussian_logpdf(x_t, np.sqrt(1.0 - b) * x_prev, b)
        if 1.0 - ab_prev <= 0.0:
            hit = np.array([np.array_equal(x_prev, self.anchors[c]) for c in cands])
            if not hit.any():
                raise ValueError("x_prev is outside the support of every candidate")
            logits = np.where(hit, logp + trans, -np.inf)
        else:
            logits = np.array([logp[i] + gaussian_logpdf(x_prev, np.sqrt(ab_prev) * self.anchors[c],
                                                         1.0 - ab_prev) + trans
                               for i, c in enumerate(cands)])
        return np.exp(_log_softmax(logits))

    def sample_pair(self, t: int, rng: np.random.Generator, label=None):
        """Draw (label, x_{t-1}, x_t) from the forward process."""
        if label is None:
            p = np.array([self.prior[k] for k in self._labels])
            label = self._labels[rng.choice(len(p), p=p)]
        ab_prev, b = self.schedule.alpha_bar[t - 1], self.schedule.beta[t]
        a = self.anchors[label]
        x_prev = np.sqrt(ab_prev) * a + np.sqrt(1.0 - ab_prev) * rng.standard_normal(a.shape)
        x_t = np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * rng.standard_normal(a.shape)
        return label, x_prev, x_t

    # -- loss-level decomposition -----------------------------------------

    def subject_mixture_terms(self, x_t, x_prev, t: int, sub_weights: dict, cate) -> dict:
        """Every term of the w_s = 1 decomposition for a subject condition that is
        a mixture over anchors (weights ``sub_weights``), evaluated exactly."""
        sigma = self.schedule.sigma[self.schedule.check_step(t)]
        ab = self.schedule.alpha_bar[t]
        labels = list(sub_weights)
        logw = np.log([sub_weights[k] for k in labels])
        ll_t = np.array([gaussian_logpdf(x_t, np.sqrt(ab) * self.anchors[k], 1.0 - ab) for k in labels])
        log_r = _log_softmax(logw + ll_t)  # log p(k | x_t, c_sub)
        log_n = np.array([gaussian_logpdf(x_prev, self.exact_mean(x_t, k, t), sigma * sigma) for k in labels])
        log_q_sub = logsumexp(log_r + log_n)
        i = labels.index(cate)
        log_cls_prev = log_r[i] + log_n[i] - log_q_sub
        return {
            "log_q_sub": float(log_q_sub),
            "log_p_cate_given_prev": float(log_cls_prev),
            "log_p_cate_given_t": float(log_r[i]),
            "log_q_sub_cate": float(log_n[i]),
        }

    def decomposition_residual(self, x_t, x_prev, t: int, sub_weights: dict, cate) -> float:
        terms = self.subject_mixture_terms(x_t, x_prev, t, sub_weights, cate)
        lhs = -terms["log_q_sub"] - terms["log_p_cate_given_prev"] + terms["log_p_cate_given_t"]
        rhs = -terms["log_q_sub_cate"]
        return abs(lhs - rhs)


# --- discrete identity --------------------------------------------------

@dataclass(frozen=True)
class DiscreteWorld:
    """Tabulated joint p(x_{t-1} = i, c_cate = k | x_t, c_sub), shape (states, categories)."""

    joint: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int = 4, n_categories: int = 3) -> "DiscreteWorld":
        p = rng.uniform(0.01, 1.0, (n_states, n_categories))
        return cls(p / p.sum())

    @classmethod
    def uniform(cls, n_states: int = 4, n_categories: int = 3) -> "DiscreteWorld":
        return cls(np.full((n_states, n_categories), 1.0 / (n_states * n_categories)))


def decomposition_check(world: DiscreteWorld) -> float:
    """max |LHS - RHS| of
    log p(x|x_t,s) + log p(k|x,x_t,s) = log p(x|x_t,s,k) + log p(k|x_t,s)
    over every cell, by brute-force marginalisation."""
    joint = np.asarray(world.joint, dtype=np.float64)
    if np.any(joint <= 0):
        raise ValueError("every cell needs positive probability")
    joint = joint / joint.sum()
    p_x = joint.sum(axis=1)
    p_k = joint.sum(axis=0)
    err = 0.0
    n_x, n_k = joint.shape
    for i in range(n_x):
        for k in range(n_k):
            lhs = np.log(p_x[i]) + np.log(joint[i, k] / p_x[i])
            rhs = np.log(joint[i, k] / p_k[k]) + np.log(p_k[k])
            err = max(err, abs(lhs - rhs))
    return float(err)

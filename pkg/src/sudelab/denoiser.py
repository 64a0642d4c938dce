"""Conditional MLP denoiser.

The network head outputs a clean-image estimate; the noise estimate and the
mean of ``p(x_{t-1} | x_t, c)`` follow from it in closed form through the
schedule.  Keeping ``x_t`` out of the learned path lets a narrow tanh network
model the identity part of the posterior mean exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as E
from .conditioning import Condition, ConditionToken, Vocabulary, stack_conditions
from .schedule import NoiseSchedule, posterior_coefficients

BRANCHES = ("live", "frozen", "pretrained_frozen")
TRAINABLE_MODES = ("embedding_only", "full_model")


@dataclass(frozen=True)
class DenoiserDims:
    d_x: int = 256
    d_c: int = 16
    d_time: int = 16
    hidden: int = 128
    n_hidden: int = 3

    def to_dict(self) -> dict:
        return dict(d_x=self.d_x, d_c=self.d_c, d_time=self.d_time,
                    hidden=self.hidden, n_hidden=self.n_hidden)


def time_features(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal step features, shape (batch, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(float(T)) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _param_names(dims: DenoiserDims, vocab: Vocabulary) -> list[str]:
    names = ["embed"] + [f"subject.{i}" for i in range(vocab.n_subjects)]
    names += ["in.x", "in.c", "in.t", "in.b"]
    for k in range(1, dims.n_hidden):
        names += [f"h{k}.w", f"h{k}.b"]
    names += ["out.w", "out.b"]
    return names


class Denoiser:
    def __init__(self, schedule: NoiseSchedule, dims: DenoiserDims = DenoiserDims(),
                 vocab: Vocabulary = Vocabulary(), seed: int = 0):
        self.schedule = schedule
        self.dims = dims
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        d, h = dims, dims.hidden
        init: dict[str, np.ndarray] = {
            "embed": rng.normal(0.0, 1.0, (vocab.n_shared, d.d_c)),
        }
        for i in range(vocab.n_subjects):
            init[f"subject.{i}"] = np.zeros(d.d_c)
        fan_in = d.d_x + d.d_c + d.d_time
        init["in.x"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (d.d_x, h))
        init["in.c"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (d.d_c, h))
        init["in.t"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (d.d_time, h))
        init["in.b"] = np.zeros(h)
        for k in range(1, d.n_hidden):
            init[f"h{k}.w"] = rng.normal(0.0, 1.0 / np.sqrt(h), (h, h))
            init[f"h{k}.b"] = np.zeros(h)
        init["out.w"] = rng.normal(0.0, 0.1 / np.sqrt(h), (h, d.d_x))
        init["out.b"] = np.zeros(d.d_x)
        self.params: dict[str, E.Array] = {n: E.parameter(init[n], name=n)
                                           for n in _param_names(dims, vocab)}
        self.pretrained: dict[str, np.ndarray] | None = None

    # -- parameter management --------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters {sorted(missing)}")
        for n, p in self.params.items():
            v = np.asarray(state[n], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"parameter {n}: expected shape {p.shape}, got {v.shape}")
            p.value = v.copy()

    def snapshot_pretrained(self) -> None:
        """Freeze the current weights as the reference model used by CIR."""
        self.pretrained = self.state()

    def init_subject(self, slot: int, category: ConditionToken, rng: np.random.Generator,
                     noise_std: float = 0.01) -> None:
        row = self.params["embed"].value[self.vocab.shared_row(category)]
        self.params[f"subject.{slot}"].value = row + rng.normal(0.0, noise_std, row.shape)

    def select_trainable(self, mode: str, slot: int = 0) -> list[E.Array]:
        if mode == "embedding_only":
            return [self.params[f"subject.{slot}"]]
        if mode == "full_model":
            return [p for n, p in self.params.items()
                    if not n.startswith("subject.") or n == f"subject.{slot}"]
        raise ValueError(f"unknown trainable mode {mode!r}; expected one of {TRAINABLE_MODES}")

    # -- forward -----------------------------------------------------------

    def _weights(self, branch: str) -> dict[str, E.Array]:
        if branch == "live":
            return self.params
        if branch == "frozen":
            return {n: E.constant(p.value) for n, p in self.params.items()}
        if branch == "pretrained_frozen":
            if self.pretrained is None:
                raise RuntimeError("no pretrained snapshot; call snapshot_pretrained() first")
            return {n: E.constant(v) for n, v in self.pretrained.items()}
        raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")

    def _cond_rows(self, cond, batch: int) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(cond, Condition):
            conds: Sequence[Condition] = [cond] * batch
        else:
            conds = cond
            if len(conds) != batch:
                raise ValueError(f"{len(conds)} conditions for a batch of {batch}")
        return stack_conditions(conds, self.vocab)

    def embed(self, cond, batch: int, w: dict[str, E.Array]) -> E.Array:
        shared, subj = self._cond_rows(cond, batch)
        emb = E.matmul(E.constant(shared), w["embed"])
        for i in np.flatnonzero(subj.any(axis=0)):
            row = E.reshape(w[f"subject.{i}"], (1, self.dims.d_c))
            emb = emb + E.matmul(E.constant(subj[:, i:i + 1]), row)
        return emb

    def predict_x0(self, x_t, cond, t, branch: str = "live") -> E.Array:
        x = E.as_array(x_t)
        squeeze = x.value.ndim == 1
        if squeeze:
            x = E.reshape(x, (1, -1))
        batch, dx = x.shape
        if dx != self.dims.d_x:
            raise ValueError(f"x_t has dimension {dx}, denoiser expects {self.dims.d_x}")
        t = self.schedule.check_step(t)
        t_rows = np.broadcast_to(np.asarray(t), (batch,))
        w = self._weights(branch)
        emb = self.embed(cond, batch, w)
        tf = E.constant(time_features(t_rows, self.dims.d_time, self.schedule.T))
        h = E.tanh(x @ w["in.x"] + emb @ w["in.c"] + tf @ w["in.t"] + w["in.b"])
        for k in range(1, self.dims.n_hidden):
            h = E.tanh(h @ w[f"h{k}.w"] + w[f"h{k}.b"])
        out = h @ w["out.w"] + w["out.b"]
        if squeeze:
            out = E.reshape(out, (dx,))
        return out if branch == "live" else E.detach(out)

    def _rows(self, x: E.Array, t):
        t = self.schedule.check_step(t)
        if x.value.ndim == 2 and np.ndim(t) == 0:
            t = np.full(x.shape[0], t)
        return t

    def predict_eps(self, x_t, cond, t, branch: str = "live") -> E.Array:
        x = E.as_array(x_t)
        x0 = self.predict_x0(x, cond, t, branch=branch)
        t = self._rows(x, t)
        ab = self.schedule.column(self.schedule.alpha_bar, t)
        xc = x if branch == "live" else E.constant(x.value)
        eps = (xc - x0 * np.sqrt(ab)) * (1.0 / np.sqrt(1.0 - ab))
        return eps if branch == "live" else E.detach(eps)

    def predict_mean(self, x_t, cond, t, branch: str = "live") -> E.Array:
        """Mean of p(x_{t-1} | x_t, c); ``frozen`` branches carry no gradient."""
        x = E.as_array(x_t)
        x0 = self.predict_x0(x, cond, t, branch=branch)
        c0, ct = posterior_coefficients(self._rows(x, t), self.schedule)
        xc = x if branch == "live" else E.constant(x.value)
        mean = x0 * c0 + xc * ct
        return mean if branch == "live" else E.detach(mean)

    __call__ = predict_mean

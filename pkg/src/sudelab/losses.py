"""Fine-tuning objectives: reconstruction, subject-derivation term, truncation
threshold and gate, class-image regularisation and the weighted total.

All norms are sums of squares.  Functions accept a single prediction of shape
``(d,)`` (scalar result) or a batch ``(B, d)`` (per-row result of shape
``(B,)``); batch averaging happens only in :func:`total_loss`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E

DEFAULT_WS = {"full_model": 0.4, "embedding_only": 1.5}


class DetachContractError(ValueError):
    """A prediction that must be gradient-free was passed with a live graph."""


def _require_frozen(x: E.Array, what: str) -> None:
    if isinstance(x, E.Array) and x.requires_grad:
        raise DetachContractError(f"{what} must come from a frozen branch (detached), "
                                  "but it carries gradient")


def _sq(a, b) -> E.Array:
    a, b = E.as_array(a), E.as_array(b)
    if a.shape != b.shape:
        raise E.ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return E.mse(a, b) if a.value.ndim == 1 else E.row_mse(a, b)


def _inv_two_sigma_sq(sigma_t):
    s = np.asarray(sigma_t, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("sigma_t must be positive")
    return 1.0 / (2.0 * s * s)


def sub_loss(pred_sub, x_prev) -> E.Array:
    return _sq(x_prev, pred_sub)


def sude_raw(pred_sub, pred_cate, pred_uncond, sigma_t) -> E.Array:
    _require_frozen(pred_cate, "pred_cate")
    _require_frozen(pred_uncond, "pred_uncond")
    diff = _sq(pred_sub, pred_cate) - _sq(pred_sub, pred_uncond)
    return diff * _inv_two_sigma_sq(sigma_t)


def threshold_tau(pred_cate, pred_uncond, sigma_t) -> E.Array:
    _require_frozen(pred_cate, "pred_cate")
    _require_frozen(pred_uncond, "pred_uncond")
    return -(_sq(pred_cate, pred_uncond) * _inv_two_sigma_sq(sigma_t))


def gate_of(l_sude_raw, tau_t) -> np.ndarray:
    raw = l_sude_raw.value if isinstance(l_sude_raw, E.Array) else np.asarray(l_sude_raw)
    tau = tau_t.value if isinstance(tau_t, E.Array) else np.asarray(tau_t)
    return np.where(raw <= tau, 0.0, 1.0)


def truncate(l_sude_raw, tau_t):
    """(gated loss, gate); the gate enters differentiation as a constant."""
    gate = gate_of(l_sude_raw, tau_t)
    gated = E.as_array(l_sude_raw) * E.constant(gate)
    if gate.ndim == 0:
        return gated, int(gate)
    return gated, gate.astype(int)


def cir_loss(pred_pretrained_cate, pred_live_cate) -> E.Array:
    _require_frozen(pred_pretrained_cate, "pred_pretrained_cate")
    return _sq(pred_pretrained_cate, pred_live_cate)


@dataclass
class LossBreakdown:
    l_sub: float
    l_sude_raw: float
    tau_t: float
    gate: float          # fraction of rows with gate == 1 for batches
    l_reg: float
    w_s: float
    w_r: float
    total: float
    loss: E.Array | None = None  # differentiable total

    def row(self) -> dict:
        return {k: getattr(self, k) for k in
                ("l_sub", "l_sude_raw", "tau_t", "gate", "l_reg", "total")}


def _mean(x: E.Array) -> E.Array:
    if x.value.ndim == 0:
        return x
    return E.scale(E.sum(x), 1.0 / x.value.size)


def _val(x) -> float:
    if x is None:
        return 0.0
    v = x.value if isinstance(x, E.Array) else np.asarray(x, dtype=np.float64)
    return float(np.mean(v))


def total_loss(l_sub, l_sude_raw=None, tau_t=None, l_reg=None, w_s: float = 0.0,
               w_r: float = 0.0, truncation: bool = True) -> LossBreakdown:
    """Assemble ``L_sub + w_s * gate * L_sude + w_r * L_reg`` averaged over the batch.

    The gate is applied per row before averaging.  With ``truncation=False``
    the gate is forced to 1 (ablation only).
    """
    if w_s < 0 or w_r < 0:
        raise ValueError("loss weights must be non-negative")
    l_sub = E.as_array(l_sub)
    total = _mean(l_sub)
    gate_frac = 1.0
    if l_sude_raw is not None and w_s > 0:
        if truncation:
            if tau_t is None:
                raise ValueError("truncation needs tau_t")
            gated, gate = truncate(l_sude_raw, tau_t)
            gate_frac = float(np.mean(gate))
        else:
            gated = E.as_array(l_sude_raw)
        total = total + E.scale(_mean(gated), w_s)
    elif l_sude_raw is not None and tau_t is not None:
        gate_frac = float(np.mean(gate_of(l_sude_raw, tau_t)))
    if l_reg is not None and w_r > 0:
        total = total + E.scale(_mean(E.as_array(l_reg)), w_r)
    return LossBreakdown(
        l_sub=_val(l_sub), l_sude_raw=_val(l_sude_raw),
        tau_t=_val(tau_t) if tau_t is not None else 0.0, gate=gate_frac,
        l_reg=_val(l_reg), w_s=float(w_s), w_r=float(w_r), total=total.item(), loss=total)

"""Experiment orchestration: pretrain, subject fine-tune, evaluate, sweep.

Every function is a pure function of its config and inputs (all randomness
is derived from ``config.seed``), and every artifact written carries the
config hash.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import engine as E
from . import io
from .checkpoint import Checkpoint, checkpoint_of, restore
from .conditioning import (ATTRIBUTE_NAMES, CONTEXT_NAMES, Condition, Vocabulary, attribute,
                           category, compose, context, null_condition, subject)
from .config import ExperimentConfig
from .denoiser import Denoiser, DenoiserDims
from .evaluator import OracleEvaluator, train_oracle
from .glyphs import GlyphDataset, gen_pretrain_set, make_subject
from .losses import (LossBreakdown, cir_loss, sub_loss, sude_raw, threshold_tau, total_loss)
from .optim import make_optimizer
from .sampler import sample
from .schedule import forward_noise, make_schedule, posterior_mean

log = logging.getLogger(__name__)

SUBJECT_SLOT = 0


class TrainingDiverged(RuntimeError):
    pass


# -- model construction ----------------------------------------------------

def build_model(config: ExperimentConfig) -> Denoiser:
    s, m = config.schedule, config.model
    dims = DenoiserDims(d_c=m.d_c, d_time=m.d_time, hidden=m.hidden, n_hidden=m.n_hidden)
    return Denoiser(make_schedule(s.T, s.beta_start, s.beta_end), dims, Vocabulary(), seed=m.init_seed)


def model_from_checkpoint(ckpt: Checkpoint) -> Denoiser:
    sched = make_schedule(**{k: ckpt.meta["schedule"][k] for k in ("T", "beta_start", "beta_end")})
    model = Denoiser(sched, DenoiserDims(**ckpt.meta["dims"]), Vocabulary(**ckpt.meta["vocab"]))
    restore(model, ckpt)
    return model


# -- pretraining -------------------------------------------------------------

def pretrain_condition(spec, rng: np.random.Generator, uncond_drop: float, token_drop: float) -> Condition:
    """Cell condition with random token dropout; the category is always kept."""
    if rng.random() < uncond_drop:
        return null_condition()
    attrs = [attribute(v) for v in spec.attributes.values() if rng.random() >= token_drop]
    ctx = [context(spec.background)] if rng.random() >= token_drop else []
    return compose(None, category(spec.category), attrs, ctx)


def pretrain(config: ExperimentConfig, out: str | Path | None = None,
             dataset: GlyphDataset | None = None) -> tuple[Denoiser, Checkpoint]:
    pc = config.pretrain
    model = build_model(config)
    sched = model.schedule
    ds = dataset or gen_pretrain_set(pc.dataset_seed, pc.per_condition)
    rng = np.random.default_rng([config.seed, 1])
    params = [p for n, p in model.params.items() if not n.startswith("subject.")]
    opt = make_optimizer(pc.optimizer, params, pc.lr)
    x_all = ds.flat
    curve = []
    for epoch in range(pc.epochs):
        opt.lr = pc.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / pc.epochs))
        order = rng.permutation(len(ds))
        total, batches = 0.0, 0
        for i in range(0, len(ds), pc.batch_size):
            idx = order[i:i + pc.batch_size]
            x0 = x_all[idx]
            t = rng.integers(1, sched.T + 1, len(idx))
            eps = rng.standard_normal(x0.shape)
            x_t = forward_noise(x0, eps, t, sched)
            conds = [pretrain_condition(ds.specs[j], rng, pc.uncond_drop, pc.token_drop) for j in idx]
            pred = model.predict_x0(x_t, conds, t)
            loss = E.scale(E.mse(pred, E.constant(x0)), 1.0 / len(idx))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"pretraining loss became {value} at epoch {epoch}, batch {batches}")
            opt.step(loss)
            total += value
            batches += 1
        curve.append({"epoch": epoch, "loss": total / batches})
        if epoch % 500 == 0:
            log.info("pretrain epoch %d loss %.5f", epoch, total / batches)
    ckpt = checkpoint_of(model, config.hash(), stage="pretrained")
    if out is not None:
        out = Path(out)
        ckpt.save(out / "pretrained.ckpt")
        io.write_csv(out / "pretrain_log.csv", curve, ("epoch", "loss"))
        config.save(out / "config.json")
    model_loaded = model_from_checkpoint(ckpt)  # continue from stored precision
    return model_loaded, Checkpoint.from_bytes(ckpt.to_bytes())


# -- fine-tuning -------------------------------------------------------------

def subject_condition(config: ExperimentConfig, attrs: Sequence[str] = (), ctx: Sequence[str] = (),
                      template: str | None = None) -> Condition:
    ft = config.finetune
    return compose(subject(SUBJECT_SLOT), category(ft.subject_category),
                   [attribute(a) for a in attrs], [context(c) for c in ctx],
                   template or ft.template)


@dataclass
class FinetuneResult:
    model: Denoiser
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    example: np.ndarray | None = None


def _step_terms(model: Denoiser, x0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                c_sub: Condition, c_cate: Condition, mode: str, w_s: float, w_r: float,
                truncation: bool) -> LossBreakdown:
    sched = model.schedule
    x_t = forward_noise(x0, eps, t, sched)
    target = posterior_mean(x0, x_t, t, sched)
    pred_sub = model.predict_mean(x_t, c_sub, t, "live")
    l_sub = sub_loss(pred_sub, E.constant(target))
    # SuDe terms are computed in every mode so the log shows where the gate would sit
    sigma = sched.sigma[t]
    pred_cate = model.predict_mean(x_t, c_cate, t, "frozen")
    pred_unc = model.predict_mean(x_t, null_condition(), t, "frozen")
    raw = sude_raw(pred_sub, pred_cate, pred_unc, sigma)
    tau = threshold_tau(pred_cate, pred_unc, sigma)
    l_reg = None
    if mode in ("cir", "sude_cir"):
        pre = model.predict_mean(x_t, c_cate, t, "pretrained_frozen")
        live = model.predict_mean(x_t, c_cate, t, "live")
        l_reg = cir_loss(pre, live)
    return total_loss(l_sub, raw, tau, l_reg, w_s=w_s, w_r=w_r, truncation=truncation)


def epoch_timesteps(rng: np.random.Generator, T: int) -> Iterator[int]:
    """Endless stream of steps in 1..T: each epoch is a fresh permutation, so every
    draw is uniform and every block of T draws visits each step once."""
    while True:
        yield from (int(t) for t in rng.permutation(T) + 1)


def finetune(config: ExperimentConfig, base: Checkpoint, out: str | Path | None = None) -> FinetuneResult:
    ft = config.finetune
    model = model_from_checkpoint(base)
    model.pretrained = None
    model.snapshot_pretrained()
    example, _ = make_subject(ft.subject_category, ft.subject_seed)
    x0 = np.broadcast_to(example.reshape(1, -1), (ft.batch_size, example.size)).copy()
    rng = np.random.default_rng([config.seed, 2])
    model.init_subject(SUBJECT_SLOT, category(ft.subject_category), rng)
    params = model.select_trainable(ft.trainable, SUBJECT_SLOT)
    opt = make_optimizer(ft.optimizer, params, ft.lr, clip=ft.clip)
    c_sub = subject_condition(config)
    c_cate = compose(None, category(ft.subject_category))
    T = model.schedule.T
    rows = []
    steps_t = epoch_timesteps(rng, T)
    for step in range(ft.steps):
        t = np.array([next(steps_t) for _ in range(ft.batch_size)])
        eps = rng.standard_normal(x0.shape)
        br = _step_terms(model, x0, t, eps, c_sub, c_cate, ft.mode, ft.w_s, ft.w_r, ft.truncation)
        if not np.isfinite(br.total):
            raise TrainingDiverged(f"fine-tuning loss became {br.total} at step {step} (t={t.tolist()})")
        opt.step(br.loss)
        if step % ft.log_every == 0:
            rows.append({"step": step, "t": int(t[0]) if len(t) == 1 else float(t.mean()), **br.row()})
    ckpt = checkpoint_of(model, config.hash(), stage="finetuned", mode=ft.mode)
    if out is not None:
        out = Path(out)
        ckpt.save(out / "finetuned.ckpt")
        io.write_csv(out / "train_log.csv", rows, io.LOG_FIELDS)
    return FinetuneResult(model, ckpt, rows, example)


# -- evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class Prompt:
    name: str
    attributes: tuple[str, ...] = ()
    contexts: tuple[str, ...] = ()

    @property
    def kind(self) -> str:
        if self.contexts:
            return "context"
        return "attribute" if self.attributes else "subject"


def default_prompts() -> list[Prompt]:
    prompts = [Prompt("subject")]
    prompts += [Prompt(a, (a,)) for a in ATTRIBUTE_NAMES]
    prompts += [Prompt(f"{a}+{c}", (a,), (c,)) for a in ATTRIBUTE_NAMES for c in CONTEXT_NAMES]
    return prompts


def parse_prompt(name: str) -> Prompt:
    if name == "subject":
        return Prompt(name)
    parts = name.split("+")
    attrs = tuple(p for p in parts if p in ATTRIBUTE_NAMES)
    ctxs = tuple(p for p in parts if p in CONTEXT_NAMES)
    if len(attrs) + len(ctxs) != len(parts):
        raise ValueError(f"unknown prompt {name!r}")
    return Prompt(name, attrs, ctxs)


def evaluate(config: ExperimentConfig, model: Denoiser, example: np.ndarray, oracle: OracleEvaluator,
             run_id: str = "run", out: str | Path | None = None,
             template: str | None = None) -> list[dict]:
    ev, ft = config.eval, config.finetune
    template = template or ev.template
    prompts = [parse_prompt(p) for p in ev.prompts] if ev.prompts else default_prompts()
    k = ev.samples_per_prompt
    conds = [subject_condition(config, p.attributes, p.contexts, template) for p in prompts for _ in range(k)]
    images = np.stack(sample(model, conds, ev.method, ev.steps, ev.eta, seed=config.seed,
                             count=len(conds))).reshape(len(prompts), k, -1)
    rows = []
    for p, imgs in zip(prompts, images):
        row = {"run_id": run_id, "mode": ft.mode, "w_s": float(ft.w_s), "template": template,
               "prompt": p.name, "kind": p.kind,
               "alignment": oracle.alignment_score(imgs, ft.subject_category, p.attributes + p.contexts),
               "fidelity": oracle.fidelity_score(imgs, example)}
        if out is not None:
            rel = Path("samples") / f"{run_id}_{template}_{p.name}"  # relative to out
            io.write_pgm(Path(out) / rel.with_suffix(".pgm"), io.tile(imgs), comment=f"config {config.hash()}")
            io.write_f32(Path(out) / rel.with_suffix(".f32"), imgs)
            row["grid"], row["blob"] = str(rel.with_suffix(".pgm")), str(rel.with_suffix(".f32"))
        rows.append(row)
    if out is not None:
        write_report(Path(out), rows, config.hash())
    return rows


def write_report(out: Path, rows: list[dict], config_hash: str, stem: str = "report") -> None:
    io.write_csv(out / f"{stem}.csv", rows, io.REPORT_FIELDS)
    io.write_json(out / f"{stem}.json", {"config_hash": config_hash, "rows": rows})


def summarize(rows: list[dict]) -> dict[str, float]:
    """Mean alignment / fidelity per prompt kind."""
    out = {}
    for kind in ("subject", "attribute", "context"):
        sel = [r for r in rows if r.get("kind", parse_prompt(r["prompt"]).kind) == kind]
        if sel:
            out[f"{kind}_alignment"] = float(np.mean([r["alignment"] for r in sel]))
            out[f"{kind}_fidelity"] = float(np.mean([r["fidelity"] for r in sel]))
    return out


def category_baseline_fidelity(config: ExperimentConfig, model: Denoiser, example: np.ndarray,
                               oracle: OracleEvaluator) -> float:
    """Fidelity of the pretrained model's plain category samples to the example."""
    ev = config.eval
    cond = compose(None, category(config.finetune.subject_category))
    imgs = np.stack(sample(model, cond, ev.method, ev.steps, ev.eta, seed=config.seed,
                           count=ev.samples_per_prompt))
    return oracle.fidelity_score(imgs, example)


# -- sweeps ---------------------------------------------------------------------

def ws_sweep(config: ExperimentConfig, base: Checkpoint, multipliers: Sequence[float],
             oracle: OracleEvaluator, seeds: Sequence[int] = (0,), out: str | Path | None = None) -> list[dict]:
    if not multipliers or any(m <= 0 for m in multipliers):
        raise ValueError("multipliers must be positive")
    w0 = config.finetune.w_s if config.finetune.w_s else None
    base_cfg = config if w0 else config.replace(finetune={"mode": "sude"})
    w0 = base_cfg.finetune.w_s
    rows = []
    for mult in multipliers:
        for seed in seeds:
            cfg = base_cfg.replace(finetune={"w_s": w0 * mult}, seed=seed)
            res = finetune(cfg, base)
            run = f"ws{mult:g}_s{seed}"
            for r in evaluate(cfg, res.model, res.example, oracle, run_id=run):
                rows.append({**r, "multiplier": mult, "seed": seed})
    if out is not None:
        write_report(Path(out), rows, config.hash(), stem="sweep")
    return rows


def get_oracle(seed: int = 0, cache: str | Path | None = None) -> OracleEvaluator:
    if cache is not None and Path(cache).exists():
        return OracleEvaluator.load(cache)
    ev = train_oracle(seed)
    if cache is not None:
        Path(cache).parent.mkdir(parents=True, exist_ok=True)
        ev.save(cache)
    return ev

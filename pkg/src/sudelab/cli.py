"""Command line entry point: ``sudelab <command> [options]``.

Exit status is 0 on success and 1 on any failure (including a failing
verification check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io, verify
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, ExperimentConfig, switch_mode
from .glyphs import make_subject

log = logging.getLogger("sudelab")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    data = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    ft = data["finetune"]
    if getattr(args, "mode", None):
        old, ft["mode"] = ft["mode"], args.mode
        switch_mode(ft, old)
    if getattr(args, "ws", None) is not None:
        ft["w_s"] = args.ws
    if getattr(args, "template", None):
        ft["template"] = data["eval"]["template"] = args.template
    return ExperimentConfig.from_dict(data)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _oracle(args, out: Path, seed: int):
    from .pipeline import get_oracle
    return get_oracle(seed, args.oracle or out / "oracle.npz")


def cmd_pretrain(args) -> int:
    from .pipeline import pretrain
    cfg, out = _config(args), _out(args)
    pretrain(cfg, out)
    print(f"wrote {out / 'pretrained.ckpt'} (config {cfg.hash()})")
    return 0


def cmd_finetune(args) -> int:
    from .pipeline import finetune
    cfg, out = _config(args), _out(args)
    res = finetune(cfg, Checkpoint.load(args.checkpoint), out)
    cfg.save(out / "config.json")
    late = res.log[len(res.log) // 2:]
    closed = float(np.mean([r["gate"] == 0 for r in late])) if late else 0.0
    print(f"wrote {out / 'finetuned.ckpt'}; gate closed on {closed:.0%} of late steps")
    return 0


def cmd_sample(args) -> int:
    from .pipeline import model_from_checkpoint, parse_prompt, subject_condition
    from .sampler import sample
    cfg, out = _config(args), _out(args)
    model = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    p = parse_prompt(args.prompt)
    cond = subject_condition(cfg, p.attributes, p.contexts, cfg.eval.template)
    imgs = np.stack(sample(model, cond, cfg.eval.method, cfg.eval.steps, cfg.eval.eta,
                           seed=cfg.seed, count=args.count))
    stem = out / f"sample_{p.name}"
    io.write_pgm(stem.with_suffix(".pgm"), io.tile(imgs), comment=f"config {cfg.hash()}")
    io.write_f32(stem.with_suffix(".f32"), imgs)
    print(f"wrote {stem.with_suffix('.pgm')}")
    return 0


def cmd_eval(args) -> int:
    from .pipeline import evaluate, model_from_checkpoint, summarize
    cfg, out = _config(args), _out(args)
    ckpt = Checkpoint.load(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    example, _ = make_subject(cfg.finetune.subject_category, cfg.finetune.subject_seed)
    oracle = _oracle(args, out, cfg.seed)
    rows = evaluate(cfg, model, example, oracle, run_id=args.run_id, out=out)
    for key, val in summarize(rows).items():
        print(f"{key:<22} {val:.4f}")
    return 0


def cmd_sweep(args) -> int:
    from .pipeline import summarize, ws_sweep
    cfg, out = _config(args), _out(args)
    mults = [float(m) for m in args.multipliers.split(",")]
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    rows = ws_sweep(cfg, Checkpoint.load(args.checkpoint), mults, _oracle(args, out, cfg.seed), seeds, out)
    print("multiplier  attribute_alignment  subject_fidelity")
    for m in mults:
        s = summarize([r for r in rows if r["multiplier"] == m])
        print(f"{m:<10g}  {s['attribute_alignment']:<19.4f}  {s['subject_fidelity']:.4f}")
    return 0


def cmd_verify(args) -> int:
    results = verify.run(args.suite)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_report(args) -> int:
    """Merge report CSVs and print mean scores per (mode, w_s, template, prompt kind)."""
    from .pipeline import parse_prompt
    rows = []
    for path in args.reports:
        rows += io.read_csv(path)
    if not rows:
        print("no rows", file=sys.stderr)
        return 1
    groups: dict[tuple, list] = {}
    for r in rows:
        key = (r["mode"], r["w_s"], r["template"], parse_prompt(r["prompt"]).kind)
        groups.setdefault(key, []).append((float(r["alignment"]), float(r["fidelity"])))
    summary = [{"mode": k[0], "w_s": k[1], "template": k[2], "kind": k[3], "n": len(v),
                "alignment": float(np.mean([a for a, _ in v])),
                "fidelity": float(np.mean([f for _, f in v]))} for k, v in sorted(groups.items())]
    print(f"{'mode':<9} {'w_s':<6} {'tpl':<4} {'kind':<10} {'n':>4} {'align':>7} {'fidel':>7}")
    for s in summary:
        print(f"{s['mode']:<9} {s['w_s']:<6} {s['template']:<4} {s['kind']:<10} {s['n']:>4} "
              f"{s['alignment']:>7.4f} {s['fidelity']:>7.4f}")
    if args.out:
        io.write_csv(_out(args) / "summary.csv", summary,
                     ("mode", "w_s", "template", "kind", "n", "alignment", "fidelity"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sudelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, *, config=True, out=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", help="JSON experiment config")
            p.add_argument("--seed", type=int, help="global seed (u64)")
            p.add_argument("--mode", choices=("baseline", "sude", "cir", "sude_cir"))
            p.add_argument("--ws", type=float, help="SuDe weight w_s")
            p.add_argument("--template", choices=("P0", "P1", "P2", "P3"))
        if out:
            p.add_argument("--out", default="runs", help="output directory")
        p.set_defaults(fn=fn)
        return p

    add("pretrain", cmd_pretrain, "train the base denoiser on the glyph set")
    p = add("finetune", cmd_finetune, "one-shot subject fine-tune")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p = add("sample", cmd_sample, "draw samples for one prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="subject", help="e.g. subject, rot45, thin+light")
    p.add_argument("--count", type=int, default=4)
    p = add("eval", cmd_eval, "score every evaluation prompt")
    p.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint")
    p.add_argument("--oracle", help="cached oracle (.npz); trained and saved in --out if absent")
    p.add_argument("--run-id", default="run")
    p = add("sweep", cmd_sweep, "w_s multiplier sweep from one pretrained checkpoint")
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    p.add_argument("--multipliers", default="0.5,1,2")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--oracle")
    p = add("verify", cmd_verify, "run the math / gradient / sampler checks", config=False, out=False)
    p.add_argument("--suite", choices=verify.SUITES + ("all",), default="all")
    p = add("report", cmd_report, "merge report CSVs into a summary table", config=False, out=False)
    p.add_argument("reports", nargs="+", help="report.csv files")
    p.add_argument("--out", help="write summary.csv here")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

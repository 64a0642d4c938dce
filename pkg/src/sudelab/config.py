"""Experiment configuration: nested dataclasses <-> strict JSON, plus a stable hash.

Unknown keys are rejected at every level.  Mode rules:

* ``baseline`` forces ``w_s = w_r = 0``;
* ``sude`` needs ``w_s > 0`` (an explicit 0 is a contradiction and rejected);
* ``cir`` forces ``w_s = 0`` and needs ``w_r > 0``;
* ``sude_cir`` needs both weights positive.

A ``w_s`` of ``None`` resolves to the default for the trainable set.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .conditioning import CATEGORY_NAMES, TEMPLATES
from .losses import DEFAULT_WS

MODES = ("baseline", "sude", "cir", "sude_cir")
TRAINABLE = ("embedding_only", "full_model")
DEFAULT_FT_LR = {"embedding_only": 5e-2, "full_model": 1e-4}
DEFAULT_WR = 1.0


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.05


@dataclass
class ModelConfig:
    d_c: int = 16
    d_time: int = 16
    hidden: int = 128
    n_hidden: int = 3
    init_seed: int = 0


@dataclass
class PretrainConfig:
    epochs: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    uncond_drop: float = 0.1
    token_drop: float = 0.5
    per_condition: int = 8
    dataset_seed: int = 0


@dataclass
class FinetuneConfig:
    mode: str = "sude"
    trainable: str = "embedding_only"
    w_s: float | None = None
    w_r: float = DEFAULT_WR
    steps: int = 1000
    lr: float | None = None
    optimizer: str = "adam"
    clip: float | None = 1.0
    batch_size: int = 1
    truncation: bool = True
    subject_category: str = "cross"
    subject_seed: int = 0
    template: str = "P1"
    log_every: int = 1


@dataclass
class EvalConfig:
    method: str = "ddpm"
    steps: int = 100
    eta: float = 0.0
    samples_per_prompt: int = 4
    template: str = "P1"
    prompts: list[str] | None = None  # None: subject alone, each attribute, attribute x context


@dataclass
class ExperimentConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # -- rules -------------------------------------------------------------

    def validate(self) -> None:
        ft = self.finetune
        if ft.mode not in MODES:
            raise ConfigError(f"finetune.mode must be one of {MODES}, got {ft.mode!r}")
        if ft.trainable not in TRAINABLE:
            raise ConfigError(f"finetune.trainable must be one of {TRAINABLE}, got {ft.trainable!r}")
        if ft.subject_category not in CATEGORY_NAMES:
            raise ConfigError(f"unknown subject category {ft.subject_category!r}")
        for where, tpl in (("finetune", ft.template), ("eval", self.eval.template)):
            if tpl not in TEMPLATES:
                raise ConfigError(f"{where}.template must be one of {TEMPLATES}, got {tpl!r}")
        if ft.w_s is not None and ft.w_s < 0 or ft.w_r < 0:
            raise ConfigError("loss weights must be non-negative")
        if ft.mode == "baseline":
            ft.w_s, ft.w_r = 0.0, 0.0
        elif ft.mode == "cir":
            ft.w_s = 0.0
        else:
            if ft.w_s is None:
                ft.w_s = DEFAULT_WS[ft.trainable]
            if ft.w_s == 0:
                raise ConfigError(f"mode={ft.mode} with w_s=0 is contradictory; use mode=baseline/cir")
        if ft.mode == "sude":
            ft.w_r = 0.0
        if ft.mode in ("cir", "sude_cir") and ft.w_r <= 0:
            raise ConfigError(f"mode={ft.mode} needs w_r > 0")
        if ft.lr is None:
            ft.lr = DEFAULT_FT_LR[ft.trainable]
        if ft.steps < 1 or ft.batch_size < 1 or ft.lr <= 0:
            raise ConfigError("finetune steps, batch_size and lr must be positive")
        pt = self.pretrain
        if not (0 <= pt.uncond_drop < 1 and 0 <= pt.token_drop < 1):
            raise ConfigError("drop probabilities must lie in [0, 1)")
        if pt.epochs < 0 or pt.batch_size < 1 or pt.lr <= 0 or pt.per_condition < 1:
            raise ConfigError("invalid pretraining settings")
        ev = self.eval
        if ev.method not in ("ddim", "ddpm"):
            raise ConfigError(f"eval.method must be ddim or ddpm, got {ev.method!r}")
        if not (1 <= ev.steps <= self.schedule.T) or not (0 <= ev.eta <= 1):
            raise ConfigError("eval.steps must lie in [1, T] and eta in [0, 1]")
        if ev.samples_per_prompt < 1:
            raise ConfigError("eval.samples_per_prompt must be >= 1")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")

    # -- (de)serialisation ---------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, data, "")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields overridden, e.g. ``replace(finetune={"mode": "baseline"})``."""
        data = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict):
                data[key].update(val)
            else:
                data[key] = val
        ft = sections.get("finetune")
        if isinstance(ft, dict) and "mode" in ft:
            switch_mode(data["finetune"], self.finetune.mode, explicit=ft)
        if isinstance(ft, dict) and ft.get("trainable", self.finetune.trainable) != self.finetune.trainable:
            for key in ("lr", "w_s"):  # defaults depend on the trainable set
                if key not in ft and data["finetune"]["mode"] != "baseline":
                    data["finetune"][key] = None
        return ExperimentConfig.from_dict(data)


def switch_mode(ft: dict, old_mode: str, explicit: dict | None = None) -> None:
    """After changing ``ft["mode"]`` away from ``old_mode``, drop weights the old
    mode had forced so the new mode picks its defaults.  Keys in ``explicit`` win."""
    explicit = explicit or {}
    if ft["mode"] == old_mode:
        return
    if "w_s" not in explicit:
        ft["w_s"] = None
    if "w_r" not in explicit:
        ft["w_r"] = DEFAULT_WR


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, val in data.items():
        sub = _SECTIONS.get(name) if cls is ExperimentConfig else None
        kwargs[name] = _build(sub, val, name) if sub else val
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


_SECTIONS = {"schedule": ScheduleConfig, "model": ModelConfig, "pretrain": PretrainConfig,
             "finetune": FinetuneConfig, "eval": EvalConfig}

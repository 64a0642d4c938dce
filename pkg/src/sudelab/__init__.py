"""Desk-scale lab for subject-derivation regularisation in conditional diffusion."""
from .checkpoint import Checkpoint
from .conditioning import Condition, ConditionToken, Vocabulary, compose, null_condition
from .config import ConfigError, ExperimentConfig
from .denoiser import Denoiser, DenoiserDims
from .losses import (LossBreakdown, cir_loss, gate_of, sub_loss, sude_raw, threshold_tau,
                     total_loss, truncate)
from .schedule import NoiseSchedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "Condition", "ConditionToken", "ConfigError", "Denoiser", "DenoiserDims",
    "ExperimentConfig", "LossBreakdown", "NoiseSchedule", "Vocabulary", "cir_loss", "compose",
    "gate_of", "make_schedule", "null_condition", "sub_loss", "sude_raw", "threshold_tau",
    "total_loss", "truncate",
]

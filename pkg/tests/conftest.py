"""Shared, disk-cached artifacts: the oracle evaluator and the pretrained base model.

Both live in pytest's cache directory keyed by the settings that produce them;
``pytest --cache-clear`` rebuilds them from scratch.
"""
import hashlib
import json
from pathlib import Path

import pytest

from sudelab.checkpoint import Checkpoint
from sudelab.config import ExperimentConfig
from sudelab.pipeline import get_oracle, pretrain

ACCEPTANCE: list[str] = []


def pretrain_key(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    blob = json.dumps({k: d[k] for k in ("schedule", "model", "pretrain", "seed")}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def artifact_dir(request) -> Path:
    return Path(request.config.cache.mkdir("sudelab"))


@pytest.fixture(scope="session")
def oracle(artifact_dir):
    return get_oracle(0, artifact_dir / "oracle-0.npz")


@pytest.fixture(scope="session")
def pretrained(artifact_dir) -> Checkpoint:
    cfg = ExperimentConfig()
    path = artifact_dir / f"pretrained-{pretrain_key(cfg)}.ckpt"
    if path.exists():
        return Checkpoint.load(path)
    _, ckpt = pretrain(cfg)
    ckpt.save(path)
    return ckpt


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

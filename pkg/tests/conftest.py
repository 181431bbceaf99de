import shutil
import tempfile
from pathlib import Path

import pytest

from niwf.config import NIWFConfig
from niwf.persistence import load_checkpoint, save_checkpoint
from niwf.protocol import (RunResult, commit_stage, eval_stage, new_history, pretrain_stage,
                           train_stage)
from niwf.model import NIWFModel
from niwf.region import CommitStore

TINY = dict(n_layers=2, d_model=16, n_heads=2, d_ff=24, vocab_size=16, max_seq_len=16, rank=2,
            num_bases=4, top_k=2, coord_dim=4, field_hidden=8, payload_min=3, payload_max=5,
            train_examples=64, val_examples=16, batch_size=4, pretrain_steps=10,
            steps_per_task=10, anchors_per_region=16)


@pytest.fixture
def tiny_config():
    return NIWFConfig(**TINY)


class DeskRuns:
    """Lazily computed full protocol runs shared across the session.

    Each run is staged by hand so the state right after the first commit can
    be kept as a checkpoint; the resulting report equals ``run_sequential``.
    """

    def __init__(self, root: Path):
        self.root = root
        self._cache: dict = {}

    def get(self, mode: str, seed: int, **overrides):
        key = (mode, seed, tuple(sorted(overrides.items())))
        if key not in self._cache:
            cfg = NIWFConfig(mode=mode, seed=seed, **overrides)
            model, store, history = NIWFModel(cfg), CommitStore(), new_history()
            pretrain_stage(model, history)
            train_stage(model, store, "A", history)
            commit_stage(model, store, "A", history)
            ckpt = self.root / f"{mode}-{seed}-{len(self._cache)}-after-commit"
            save_checkpoint(model, store, ckpt, history)
            train_stage(model, store, "B", history)
            report, extras = eval_stage(model, store, history)
            self._cache[key] = (RunResult(report, extras, model, store, history), ckpt)
        return self._cache[key]

    def before_b(self, mode: str, seed: int, **overrides):
        return load_checkpoint(self.get(mode, seed, **overrides)[1])


@pytest.fixture(scope="session")
def desk_runs():
    root = Path(tempfile.mkdtemp(prefix="niwf-desk-"))
    yield DeskRuns(root)
    shutil.rmtree(root, ignore_errors=True)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

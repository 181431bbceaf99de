"""Objective assembly, task training, evaluation and the sequential protocol.

A run is a sequence of stages (pretrain, train task, commit, evaluate) that
communicate only through the model, the commit store and a JSON-friendly
``history`` dict. The CLI runs the same stages with checkpoints in between,
so a staged run and a one-shot run produce identical reports.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .analysis import coord_stats, entropy_summary
from .backbone import pretrain_backbone
from .config import NIWFConfig
from .dynamics import two_pass_forward
from .errors import ContractError
from .model import NIWFModel
from .optim import AdamWState, Schedule, adamw_step, clip_grad_norm
from .region import (CommitStore, acceptance_rate, commit, lock_loss, separation_loss,
                     verify_commit)
from .rng import Rng
from .tasks import Example, gen_neutral, make_batches, task_corpus
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

TASK_ORDER = ("A", "B")
EVAL_BATCH = 100


@dataclass(frozen=True)
class LossWeights:
    lock: float = 0.0
    sep: float = 0.0
    budget: float = 1e-4
    margin: float = 0.0

    def __post_init__(self):
        if min(self.lock, self.sep, self.budget, self.margin) < 0:
            raise ContractError("loss weights must be non-negative")

    @classmethod
    def for_task(cls, config: NIWFConfig, task_index: int) -> "LossWeights":
        return cls(**config.loss_weights(task_index))


def total_loss(nll: Tensor, model: NIWFModel, store: CommitStore, z_batch, weights: LossWeights):
    """``nll + lock_w * lock + sep_w * sep + budget_w * k``.

    Returns ``(loss, parts)`` where ``parts`` holds the unweighted float values.
    Terms with zero weight are evaluated off the tape for reporting only.
    """
    loss = nll
    parts = {"nll": float(nll.data), "lock": 0.0, "sep": 0.0}
    if len(store):
        if weights.lock > 0:
            lock = lock_loss(model.field, store)
            loss = loss + lock * weights.lock
        else:
            with no_grad():
                lock = lock_loss(model.field, store)
        parts["lock"] = float(lock.data)
        if weights.sep > 0:
            sep = separation_loss(z_batch, store, weights.margin)
            loss = loss + sep * weights.sep
        else:
            with no_grad():
                sep = separation_loss(z_batch, store, weights.margin)
        parts["sep"] = float(sep.data)
    if weights.budget:
        loss = loss + weights.budget * model.top_k
    return loss, parts


@dataclass
class TrainState:
    task: str
    total_steps: int
    step: int = 0
    adam: AdamWState = field(default_factory=AdamWState)
    trace: list[dict] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return self.step >= self.total_steps


def _epoch_batches(config: NIWFConfig, corpus, task: str, epoch: int):
    rng = Rng(config.seed).child("shuffle", task, epoch)
    return make_batches(corpus, config.batch_size, config.max_seq_len, rng, drop_last=True)


def train_task(model: NIWFModel, corpus: list[Example], store: CommitStore, weights: LossWeights,
               schedule: Schedule, task: str, state: TrainState | None = None,
               stop_at: int | None = None) -> TrainState:
    """Optimise on ``corpus`` until ``schedule.total_steps`` (or ``stop_at``) steps.

    Batch order is a pure function of (seed, task, step), so a run resumed
    from a saved :class:`TrainState` continues exactly where it left off.
    """
    cfg = model.config
    if state is None:
        state = TrainState(task, schedule.total_steps,
                           adam=AdamWState(weight_decay=cfg.weight_decay, no_decay=model.no_decay()))
    end = state.total_steps if stop_at is None else min(stop_at, state.total_steps)
    params = model.trainable_parameters()
    accum = cfg.grad_accum
    per_epoch = len(corpus) // cfg.batch_size
    if per_epoch == 0:
        raise ContractError("corpus smaller than one batch")
    cache: dict[int, list] = {}
    while state.step < end:
        s = state.step
        model.zero_grad()
        parts_sum = {"nll": 0.0, "lock": 0.0, "sep": 0.0}
        for a in range(accum):
            epoch, pos = divmod(s * accum + a, per_epoch)
            if epoch not in cache:
                cache.clear()
                cache[epoch] = _epoch_batches(cfg, corpus, task, epoch)
            batch = cache[epoch][pos]
            nll, z1, _ = two_pass_forward(model, batch.tokens, batch.loss_mask, store)
            loss, parts = total_loss(nll, model, store, z1, weights)
            backward(loss * (1.0 / accum) if accum > 1 else loss)
            for k in parts_sum:
                parts_sum[k] += parts[k] / accum
        if cfg.hard_lock:
            for bank in model.banks.values():
                bank.mask_gradients()
        clip_grad_norm(params.values(), cfg.grad_clip)
        lr = schedule.lr(s + 1)
        adamw_step(params, state.adam, lr, model.frozen_masks())
        state.step += 1
        state.trace.append({"task": task, "step": state.step, "nll": parts_sum["nll"],
                            "lock_loss": parts_sum["lock"], "sep_loss": parts_sum["sep"], "lr": lr})
        if state.step % 50 == 0:
            log.info("task %s step %d nll %.4f lock %.3g sep %.3g", task, state.step,
                     parts_sum["nll"], parts_sum["lock"], parts_sum["sep"])
    model.zero_grad()
    return state


def evaluate(model: NIWFModel, corpus: list[Example], store: CommitStore | None = None,
             batch: int = EVAL_BATCH) -> dict:
    """No-gradient pass over ``corpus``: token-weighted NLL, coordinates, entropies."""
    if not corpus:
        raise ContractError("evaluate: empty corpus")
    total, count = 0.0, 0
    coords, entropies = [], []
    with no_grad():
        for b in make_batches(corpus, batch, model.config.max_seq_len):
            nll, z1, diag = two_pass_forward(model, b.tokens, b.loss_mask, store)
            n = int(b.loss_mask[:, 1:].sum())
            total += float(nll.data) * n
            count += n
            coords.append(z1.data.copy())
            entropies.append(diag.entropy())
    nll = total / count
    return {"nll": nll, "ppl": math.exp(nll), "coords": np.concatenate(coords),
            "entropy": np.concatenate(entropies, axis=1)}


def evaluate_perplexity(model: NIWFModel, corpus: list[Example], store: CommitStore | None = None):
    r = evaluate(model, corpus, store)
    return r["nll"], r["ppl"]


def collect_coords(model: NIWFModel, corpus: list[Example], store: CommitStore | None = None) -> np.ndarray:
    return evaluate(model, corpus, store)["coords"]


def forgetting_pct(ppl_after_own: float, ppl_final: float) -> float:
    return (ppl_final / ppl_after_own - 1.0) * 100.0


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def corpora(config: NIWFConfig, task: str) -> tuple[list[Example], list[Example]]:
    lr = (config.payload_min, config.payload_max)
    train = task_corpus(task, "train", config.train_examples, config.seed, lr, config.vocab_size)
    val = task_corpus(task, "val", config.val_examples, config.seed, lr, config.vocab_size)
    return train, val


def new_history() -> dict:
    return {"stage0": {}, "tasks_done": [], "traces": {}, "evals": {}, "commits": {}}


def pretrain_stage(model: NIWFModel, history: dict) -> None:
    cfg = model.config
    rng = Rng(cfg.seed).child("stage0")
    corpus = gen_neutral(cfg.train_examples, rng.child("corpus"), cfg.vocab_size,
                         (cfg.payload_min, cfg.payload_max))
    trace = pretrain_backbone(model.backbone, corpus, cfg.pretrain_steps, rng.child("batches"),
                              lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                              weight_decay=cfg.weight_decay)
    history["stage0"] = {"steps": cfg.pretrain_steps, "nll_first": trace[0] if trace else None,
                         "nll_last": trace[-1] if trace else None, "trace": trace}


def start_task(model: NIWFModel, task: str, history: dict) -> TrainState:
    cfg = model.config
    if task in history["tasks_done"]:
        raise ContractError(f"task {task!r} already trained")
    return TrainState(task, cfg.steps_per_task,
                      adam=AdamWState(weight_decay=cfg.weight_decay, no_decay=model.no_decay()))


def train_stage(model: NIWFModel, store: CommitStore, task: str, history: dict,
                state: TrainState | None = None, stop_at: int | None = None) -> TrainState:
    """Train ``task``; when the step budget is exhausted, record its own validation score."""
    cfg = model.config
    if state is None:
        state = start_task(model, task, history)
    weights = LossWeights.for_task(cfg, len(history["tasks_done"]))
    train, val = corpora(cfg, task)
    schedule = Schedule(cfg.learning_rate, cfg.steps_per_task, cfg.warmup_fraction)
    train_task(model, train, store, weights, schedule, task, state, stop_at)
    if state.finished:
        r = evaluate(model, val, store)
        history["tasks_done"].append(task)
        history["traces"][task] = state.trace
        history["evals"][task] = {"nll": r["nll"], "ppl": r["ppl"]}
    return state


def commit_stage(model: NIWFModel, store: CommitStore, task: str, history: dict):
    if task not in history["tasks_done"]:
        raise ContractError(f"task {task!r} must be trained before it is committed")
    cfg = model.config
    train, _ = corpora(cfg, task)
    coords = collect_coords(model, train, store)
    step = sum(len(t) for t in history["traces"].values())
    region = commit(model, store, coords, task, created_step=step)
    history["commits"][task] = {
        "n_coords": int(coords.shape[0]),
        "tau": region.tau,
        "inside_fraction_at_commit": float(region.contains(coords).mean()),
        "verify_at_commit": verify_commit(model.field, region),
    }
    return region


def eval_stage(model: NIWFModel, store: CommitStore, history: dict) -> tuple[dict, dict]:
    """Final evaluation. Returns ``(report, extras)``; extras carry raw arrays for exports."""
    cfg = model.config
    tasks = list(history["tasks_done"])
    finals = {t: evaluate(model, corpora(cfg, t)[1], store) for t in tasks}
    task_rows = {}
    for t in tasks:
        own = history["evals"][t]
        task_rows[t] = {
            "nll_after_own": own["nll"],
            "ppl_after_own": own["ppl"],
            "nll_final": finals[t]["nll"],
            "ppl_final": finals[t]["ppl"],
            "forgetting_pct": forgetting_pct(own["ppl"], finals[t]["ppl"]),
        }
    regions = {}
    for region in store:
        stats = {t: coord_stats(finals[t]["coords"], region) for t in tasks}
        regions[region.region_id] = {
            "tau": region.tau,
            "verify_max_deviation": verify_commit(model.field, region),
            "inside_fraction": {t: s["inside_fraction"] for t, s in stats.items()},
            "acceptance_rate": acceptance_rate(region.mu, region.sigma, region.tau, 10_000,
                                               Rng(cfg.seed).child("acceptance", region.region_id)),
        }
    lock_trace = {}
    for t in tasks:
        tr = history["traces"].get(t, [])
        if tr and any(row["lock_loss"] for row in tr):
            lock_trace[t] = {"initial": tr[0]["lock_loss"], "final": tr[-1]["lock_loss"]}
    report = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "tasks": task_rows,
        "regions_active": len(store),
        "regions": regions,
        "commits": history["commits"],
        "lock_trace": lock_trace,
        "entropy_mean": {t: [float(v) for v in finals[t]["entropy"].mean(axis=1)] for t in tasks},
    }
    extras = {"finals": finals, "entropy": {t: entropy_summary(finals[t]["entropy"]) for t in tasks}}
    return report, extras


@dataclass
class RunResult:
    report: dict
    extras: dict
    model: NIWFModel
    store: CommitStore
    history: dict


def run_sequential(config: NIWFConfig, tasks=TASK_ORDER) -> RunResult:
    """Pretrain, then for each task: train, and commit every task but the last; evaluate."""
    model = NIWFModel(config)
    store = CommitStore()
    history = new_history()
    pretrain_stage(model, history)
    for i, task in enumerate(tasks):
        train_stage(model, store, task, history)
        if i < len(tasks) - 1:
            commit_stage(model, store, task, history)
    report, extras = eval_stage(model, store, history)
    return RunResult(report, extras, model, store, history)

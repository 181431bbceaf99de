"""Synthetic sequence tasks sharing one vocabulary.

Task A copies the payload after the separator, Task B reverses it. Both
draw payload symbols uniformly, so their token histograms are identical
and only the ordering tells them apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .rng import Rng

PAD, BOS, SEP = 0, 1, 2
FIRST_SYMBOL = 3


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    loss_mask: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Batch:
    tokens: np.ndarray     # [B, T] int64, right-padded with PAD
    loss_mask: np.ndarray  # [B, T] bool, True on target positions

    @property
    def pad_mask(self) -> np.ndarray:
        return self.tokens != PAD


def _make_example(payload: Sequence[int], target: Sequence[int]) -> Example:
    tokens = (BOS, *payload, SEP, *target)
    n_prefix = len(payload) + 2
    mask = (False,) * n_prefix + (True,) * len(target)
    return Example(tuple(int(t) for t in tokens), mask)


def _payloads(n: int, len_range: tuple[int, int], rng: Rng, vocab_size: int):
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ContractError(f"bad payload length range {len_range}")
    lengths = rng.integers(lo, hi + 1, n)
    for m in lengths:
        yield rng.integers(FIRST_SYMBOL, vocab_size, int(m))


def gen_copy(n: int, len_range: tuple[int, int], rng: Rng, vocab_size: int = 64) -> list[Example]:
    """``BOS s1..sm SEP s1..sm``."""
    return [_make_example(p, p) for p in _payloads(n, len_range, rng, vocab_size)]


def gen_reverse(n: int, len_range: tuple[int, int], rng: Rng, vocab_size: int = 64) -> list[Example]:
    """``BOS s1..sm SEP sm..s1``."""
    return [_make_example(p, p[::-1]) for p in _payloads(n, len_range, rng, vocab_size)]


def gen_neutral(n: int, rng: Rng, vocab_size: int = 64,
                len_range: tuple[int, int] = (4, 8)) -> list[Example]:
    """``BOS payload SEP prefix`` where the prefix is the payload cut at a
    uniformly random length in ``[1, m]``."""
    out = []
    for p in _payloads(n, len_range, rng, vocab_size):
        cut = int(rng.integers(1, len(p) + 1))
        out.append(_make_example(p, p[:cut]))
    return out


TASKS: dict[str, Callable[..., list[Example]]] = {"A": gen_copy, "B": gen_reverse}


def pad_batch(examples: Sequence[Example], max_len: int) -> Batch:
    if not examples:
        raise ContractError("pad_batch: empty example list")
    T = max(len(e) for e in examples)
    if T > max_len:
        raise ContractError(f"example of length {T} exceeds max_seq_len {max_len}")
    tokens = np.full((len(examples), T), PAD, dtype=np.int64)
    mask = np.zeros((len(examples), T), dtype=bool)
    for i, e in enumerate(examples):
        tokens[i, : len(e)] = e.tokens
        mask[i, : len(e)] = e.loss_mask
    return Batch(tokens, mask)


def make_batches(examples: Sequence[Example], batch: int, max_len: int,
                 rng: Rng | None = None, drop_last: bool = False) -> list[Batch]:
    """Split into right-padded batches; shuffle first when ``rng`` is given."""
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    out = []
    for start in range(0, len(order), batch):
        chunk = order[start: start + batch]
        if drop_last and len(chunk) < batch:
            break
        out.append(pad_batch([examples[i] for i in chunk], max_len))
    return out


def task_corpus(task: str, split: str, n: int, seed: int, len_range: tuple[int, int],
                vocab_size: int = 64) -> list[Example]:
    """Deterministic train/validation corpus for a named task."""
    rng = Rng(seed).child("corpus", task, split)
    return TASKS[task](n, len_range, rng, vocab_size)

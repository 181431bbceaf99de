"""AdamW, global-norm clipping, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: frozenset[str] = frozenset()


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping happened).
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))
    if total <= max_norm or total == 0.0:
        return 1.0
    scale = max_norm / total
    for g in grads:
        g *= g.dtype.type(scale)
    return scale


def adamw_step(
    params: Mapping[str, Tensor],
    state: AdamWState,
    lr: float,
    frozen: Mapping[str, np.ndarray] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``frozen`` maps a parameter name to a boolean array broadcastable to the
    parameter; entries that are True are left bit-identical (no gradient step
    and no decay).
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        step = mhat / (np.sqrt(vhat) + dt(state.eps))
        if state.weight_decay and name not in state.no_decay:
            step = step + dt(state.weight_decay) * p.data
        new = p.data - dt(lr) * step
        mask = None if frozen is None else frozen.get(name)
        if mask is not None:
            new = np.where(mask, p.data, new)
        p.data[...] = new


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.05

    @property
    def warmup_steps(self) -> int:
        if self.total_steps <= 0:
            return 0
        return min(self.total_steps, max(1, round(self.warmup_fraction * self.total_steps)))

    def lr(self, step: int) -> float:
        return lr_at_step(self, step)


def lr_at_step(schedule: Schedule, step: int) -> float:
    """Linear warmup from 0 to peak, then cosine decay to exactly 0."""
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.peak_lr * step / w
    if step >= total:
        return 0.0
    progress = (step - w) / (total - w)
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))

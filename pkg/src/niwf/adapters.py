"""Low-rank adapter banks with sequence-level sparse gating.

A bank holds ``N_b`` factor pairs ``A_b [d_out, r]`` and ``B_b [r, d_in]``.
For every sequence in a batch one set of ``k`` bases and mixing weights is
chosen, and the adapter contribution is contracted through the rank
bottleneck so no ``[B, T, k, d_out, r]`` tensor is ever built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import Rng
from .tensor import Tensor, matmul, take


@dataclass
class GatingDecision:
    """Per-layer selection: ``indices [B, k]`` and softmax ``weights [B, k]``."""

    indices: np.ndarray
    weights: Tensor

    @property
    def k(self) -> int:
        return self.indices.shape[1]


class GatingRegistry(dict):
    """Maps ``"layer.module_name"`` to the :class:`GatingDecision` for this pass."""

    @classmethod
    def from_layers(cls, decisions, module_names) -> "GatingRegistry":
        reg = cls()
        for layer, dec in enumerate(decisions):
            for name in module_names:
                reg[f"{layer}.{name}"] = dec
        return reg


def kaiming_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class AdapterBank:
    def __init__(self, A: np.ndarray, B: np.ndarray, rank: int, alpha: float,
                 trainable_mask: np.ndarray | None = None, name: str = ""):
        self.A = Tensor(A, requires_grad=True, name=f"{name}.A")
        self.B = Tensor(B, requires_grad=True, name=f"{name}.B")
        self.rank = rank
        self.alpha = float(alpha)
        self.name = name
        n = self.A.shape[0]
        self.trainable_mask = (np.ones(n, dtype=bool) if trainable_mask is None
                               else np.asarray(trainable_mask, dtype=bool).copy())

    @property
    def num_bases(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.A.shape[1]

    @property
    def d_in(self) -> int:
        return self.B.shape[2]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, b: int) -> np.ndarray:
        return self.A.data[b] @ self.B.data[b]

    def frozen_masks(self) -> dict[str, np.ndarray]:
        """Optimizer masks (True = leave untouched) for bases that are locked."""
        locked = ~self.trainable_mask
        return {self.A.name: locked[:, None, None], self.B.name: locked[:, None, None]}

    def mask_gradients(self) -> None:
        locked = ~self.trainable_mask
        if not locked.any():
            return
        for p in (self.A, self.B):
            if p.grad is not None:
                p.grad[locked] = 0

    def parameters(self) -> dict[str, Tensor]:
        return {self.A.name: self.A, self.B.name: self.B}


def init_bank(d_in: int, d_out: int, rank: int, num_bases: int, alpha: float, rng: Rng,
              name: str = "") -> AdapterBank:
    """``A`` all zeros, ``B`` Kaiming-uniform with fan_in = d_in."""
    if min(d_in, d_out, rank, num_bases) <= 0 or alpha <= 0:
        raise ContractError("init_bank: all sizes and alpha must be positive")
    if rank > min(d_in, d_out):
        raise ContractError(f"init_bank: rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}")
    A = np.zeros((num_bases, d_out, rank), dtype=np.float32)
    B = kaiming_uniform(rng, (num_bases, rank, d_in), d_in)
    return AdapterBank(A, B, rank, alpha, name=name)


def expand_bank(bank: AdapterBank, extra_bases: int, rng: Rng) -> AdapterBank:
    """Append freshly initialised bases; existing ones are carried over bit-exactly."""
    if extra_bases < 1:
        raise ContractError("expand_bank: extra_bases must be >= 1")
    A_new = np.zeros((extra_bases, bank.d_out, bank.rank), dtype=np.float32)
    B_new = kaiming_uniform(rng, (extra_bases, bank.rank, bank.d_in), bank.d_in)
    return AdapterBank(
        np.concatenate([bank.A.data, A_new]),
        np.concatenate([bank.B.data, B_new]),
        bank.rank,
        bank.alpha,
        np.concatenate([bank.trainable_mask, np.ones(extra_bases, dtype=bool)]),
        name=bank.name,
    )


def _check_decision(bank: AdapterBank, decision: GatingDecision, batch: int) -> None:
    idx = decision.indices
    if idx.ndim != 2 or idx.shape[0] != batch or decision.weights.shape != idx.shape:
        raise ContractError(f"gating decision shape {idx.shape} does not match batch {batch}")
    if idx.shape[1] > bank.num_bases:
        raise ContractError(f"k={idx.shape[1]} exceeds N_b={bank.num_bases}")
    if (idx < 0).any() or (idx >= bank.num_bases).any():
        raise ContractError(f"gating index outside [0, {bank.num_bases})")


def niwf_linear_forward(x: Tensor, W_base: Tensor, bank: AdapterBank | None = None,
                        decision: GatingDecision | None = None, probe: list | None = None) -> Tensor:
    """``y = x W_base^T + (alpha/r) sum_j w_j (x B_j^T) A_j^T`` for ``x [B, T, d_in]``.

    When ``probe`` is a list, the shapes of the adapter intermediates are
    appended to it.
    """
    y = matmul(x, W_base.transpose())
    if bank is None or decision is None:
        return y
    Bsz, T, _ = x.shape
    _check_decision(bank, decision, Bsz)
    k, r = decision.k, bank.rank
    B_sel = take(bank.B, decision.indices)                       # [B, k, r, d_in]
    A_sel = take(bank.A, decision.indices)                       # [B, k, d_out, r]
    B_cat = B_sel.reshape(Bsz, k * r, bank.d_in).swapaxes(1, 2)  # [B, d_in, k*r]
    h = matmul(x, B_cat).reshape(Bsz, T, k, r)                   # [B, T, k, r]
    w = (decision.weights * bank.scale).reshape(Bsz, 1, k, 1)
    hw = (h * w).reshape(Bsz, T, k * r)
    A_cat = A_sel.swapaxes(2, 3).reshape(Bsz, k * r, bank.d_out)  # [B, k*r, d_out]
    delta = matmul(hw, A_cat)                                    # [B, T, d_out]
    if probe is not None:
        probe.extend([("gather_B", B_sel.shape), ("gather_A", A_sel.shape),
                      ("h", h.shape), ("hw", (Bsz, T, k, r))])
    return y + delta


def dense_delta_oracle(x, W_base, bank: AdapterBank, decision: GatingDecision) -> np.ndarray:
    """Reference path: build each row's full ``Delta W`` and apply it, in float64.

    Test oracle only; cost is ``O(B * d_out * d_in)`` per call.
    """
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    W = np.asarray(W_base.data if isinstance(W_base, Tensor) else W_base, dtype=np.float64)
    A = bank.A.data.astype(np.float64)
    Bm = bank.B.data.astype(np.float64)
    w = np.asarray(decision.weights.data, dtype=np.float64)
    out = np.empty(xd.shape[:2] + (W.shape[0],))
    for row in range(xd.shape[0]):
        dW = np.zeros_like(W)
        for j, b in enumerate(decision.indices[row]):
            dW += w[row, j] * (A[b] @ Bm[b])
        out[row] = xd[row] @ (W + bank.scale * dW).T
    return out

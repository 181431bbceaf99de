"""Toy decoder-only transformer with Mistral-shaped blocks.

Each layer exposes seven projections (q, k, v, o, gate, up, down) through a
:class:`ModuleRegistry`; every projection is routed through
:func:`niwf.adapters.niwf_linear_forward` so adapter banks can be attached
without touching the block code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapters import AdapterBank, GatingRegistry, niwf_linear_forward
from .config import MODULE_NAMES, NIWFConfig
from .errors import ContractError, InputError
from .optim import AdamWState, Schedule, adamw_step, clip_grad_norm
from .rng import Rng
from .tasks import PAD, Example, make_batches
from .tensor import (Tensor, activation, backward, cross_entropy_nll, matmul, no_grad,
                     rms_norm, softmax, take)

_MASKED = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 64
    max_seq_len: int = 64
    n_kv_heads: int | None = None

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size,
               self.max_seq_len) <= 0:
            raise ContractError("backbone extents must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def kv_dim(self) -> int:
        return (self.n_kv_heads or self.n_heads) * self.head_dim

    @classmethod
    def from_config(cls, cfg: NIWFConfig) -> "BackboneConfig":
        return cls(cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len)


@dataclass(frozen=True)
class ModuleEntry:
    layer: int
    name: str
    d_in: int
    d_out: int

    @property
    def key(self) -> str:
        return f"{self.layer}.{self.name}"


class ModuleRegistry:
    def __init__(self, entries: list[ModuleEntry]):
        self.entries = entries
        self._by_key = {e.key: e for e in entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key: str) -> ModuleEntry:
        return self._by_key[key]

    def __contains__(self, key: str) -> bool:
        return key in self._by_key

    def keys(self) -> list[str]:
        return [e.key for e in self.entries]


def module_dims(cfg: BackboneConfig, name: str) -> tuple[int, int]:
    d, q, kv, ff = cfg.d_model, cfg.d_model, cfg.kv_dim, cfg.d_ff
    return {
        "q_proj": (d, q),
        "k_proj": (d, kv),
        "v_proj": (d, kv),
        "o_proj": (q, d),
        "gate_proj": (d, ff),
        "up_proj": (d, ff),
        "down_proj": (ff, d),
    }[name]


def build_registry(cfg: BackboneConfig, target_modules=MODULE_NAMES) -> ModuleRegistry:
    entries = []
    for layer in range(cfg.n_layers):
        for name in MODULE_NAMES:
            if name in target_modules:
                d_in, d_out = module_dims(cfg, name)
                entries.append(ModuleEntry(layer, name, d_in, d_out))
    return ModuleRegistry(entries)


class Backbone:
    """Pre-norm transformer with learned absolute positions and a tied output head."""

    def __init__(self, cfg: BackboneConfig, rng: Rng):
        if cfg.n_kv_heads not in (None, cfg.n_heads):
            raise ContractError("the toy backbone does not implement grouped-query attention")
        self.cfg = cfg
        self.frozen = False
        self.pretrained = False
        d = cfg.d_model
        p: dict[str, Tensor] = {}
        p["tok_emb"] = Tensor(rng.child("tok_emb").normal((cfg.vocab_size, d), 0.02))
        p["pos_emb"] = Tensor(rng.child("pos_emb").normal((cfg.max_seq_len, d), 0.02))
        for layer in range(cfg.n_layers):
            p[f"layers.{layer}.attn_norm"] = Tensor(np.ones(d, dtype=np.float32))
            p[f"layers.{layer}.mlp_norm"] = Tensor(np.ones(d, dtype=np.float32))
            for name in MODULE_NAMES:
                d_in, d_out = module_dims(cfg, name)
                bound = 1.0 / math.sqrt(d_in)
                w = rng.child("layer", layer, name).uniform(-bound, bound, (d_out, d_in))
                p[f"layers.{layer}.{name}"] = Tensor(w)
        p["final_norm"] = Tensor(np.ones(d, dtype=np.float32))
        self.params = p
        self.set_trainable(True)

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def freeze(self) -> None:
        self.set_trainable(False)
        self.frozen = True

    def parameters(self) -> dict[str, Tensor]:
        return {f"backbone.{k}": v for k, v in self.params.items()}

    def _attention_bias(self, tokens: np.ndarray) -> np.ndarray:
        T = tokens.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))
        keep = causal[None, :, :] & (tokens != PAD)[:, None, :]
        keep[:, np.arange(T), np.arange(T)] = True
        return np.where(keep, 0.0, _MASKED).astype(np.float32)[:, None, :, :]

    def forward(self, tokens, banks: dict[str, AdapterBank] | None = None,
                gating: GatingRegistry | None = None, taps: dict | None = None):
        """Return ``(logits [B, T, V], final_hidden [B, T, d_model])``.

        Modules without a gating entry contribute only their base projection.
        If ``taps`` is a dict, every wrapped projection's output is copied into
        it under ``"layer.name"``.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        cfg, p = self.cfg, self.params
        if tokens.ndim != 2:
            raise InputError(f"tokens must be [B, T], got shape {tokens.shape}")
        B, T = tokens.shape
        if T > cfg.max_seq_len:
            raise ContractError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise InputError(f"token id outside [0, {cfg.vocab_size})")
        banks = banks or {}
        gating = gating or {}

        def proj(layer: int, name: str, h: Tensor) -> Tensor:
            key = f"{layer}.{name}"
            y = niwf_linear_forward(h, p[f"layers.{key}"], banks.get(key), gating.get(key))
            if taps is not None:
                taps[key] = y.data.copy()
            return y

        H, hd = cfg.n_heads, cfg.head_dim
        bias = self._attention_bias(tokens)
        scale = 1.0 / math.sqrt(hd)
        x = take(p["tok_emb"], tokens) + p["pos_emb"][:T]
        for layer in range(cfg.n_layers):
            h = rms_norm(x, p[f"layers.{layer}.attn_norm"])
            q = proj(layer, "q_proj", h).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            k = proj(layer, "k_proj", h).reshape(B, T, H, hd).transpose(0, 2, 3, 1)
            v = proj(layer, "v_proj", h).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            att = softmax(matmul(q, k) * scale + bias, axis=-1)
            o = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + proj(layer, "o_proj", o)
            h = rms_norm(x, p[f"layers.{layer}.mlp_norm"])
            ff = activation(proj(layer, "gate_proj", h), "silu") * proj(layer, "up_proj", h)
            x = x + proj(layer, "down_proj", ff)
        hidden = rms_norm(x, p["final_norm"])
        logits = matmul(hidden, p["tok_emb"].transpose())
        return logits, hidden


def next_token_targets(tokens: np.ndarray, loss_mask: np.ndarray):
    """Align position ``t`` logits with token ``t+1``; the last position is never scored."""
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    mask = np.zeros_like(loss_mask, dtype=bool)
    mask[:, :-1] = loss_mask[:, 1:]
    return targets, mask


def pretrain_backbone(backbone: Backbone, corpus: list[Example], steps: int, rng: Rng,
                      lr: float = 3e-3, batch_size: int = 8, weight_decay: float = 0.01) -> list[float]:
    """Stage-0 language-model training on ``corpus`` over every non-pad
    position, then permanent freeze. Returns the per-step NLL trace."""
    if backbone.pretrained or backbone.frozen:
        raise ContractError("pretrain_backbone may only run once on an unfrozen backbone")
    params = backbone.parameters()
    no_decay = frozenset(k for k in params if k.endswith("norm"))
    state = AdamWState(weight_decay=weight_decay, no_decay=no_decay)
    schedule = Schedule(lr, steps)
    n_per_epoch = max(1, len(corpus) // batch_size)
    epoch_batches: list = []
    trace = []
    for step in range(steps):
        epoch, pos = divmod(step, n_per_epoch)
        if pos == 0:
            epoch_batches = make_batches(corpus, batch_size, backbone.cfg.max_seq_len,
                                         rng.child("epoch", epoch), drop_last=True)
        batch = epoch_batches[pos]
        targets, mask = next_token_targets(batch.tokens, batch.pad_mask)
        for t in params.values():
            t.grad = None
        logits, _ = backbone.forward(batch.tokens)
        loss = cross_entropy_nll(logits, targets, mask)
        backward(loss)
        clip_grad_norm(params.values(), 1.0)
        adamw_step(params, state, schedule.lr(step + 1))
        trace.append(float(loss.data))
    backbone.pretrained = True
    backbone.freeze()
    return trace


def plain_forward(backbone: Backbone, tokens) -> np.ndarray:
    """Logits of the unwrapped backbone (no adapter banks at all)."""
    with no_grad():
        logits, _ = backbone.forward(tokens)
    return logits.data

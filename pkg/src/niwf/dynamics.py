"""Recurrent coordinate navigator and the two-pass forward."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapters import GatingDecision
from .backbone import next_token_targets
from .errors import ContractError
from .field import gate_topk
from .rng import Rng
from .tasks import PAD
from .tensor import (Tensor, activation, as_tensor, cross_entropy_nll, layer_norm, matmul,
                     mean_pool, no_grad)


class CoordDynamics:
    """GRU cell (input: pooled hidden, state: coordinate), LayerNorm, projection, tanh."""

    GATES = ("r", "u", "n")

    def __init__(self, input_dim: int, coord_dim: int, rng: Rng):
        self.input_dim = input_dim
        self.coord_dim = coord_dim
        bound = 1.0 / math.sqrt(coord_dim)
        p: dict[str, Tensor] = {}
        for g in self.GATES:
            p[f"dyn.W_{g}"] = Tensor(rng.child("W", g).uniform(-bound, bound, (coord_dim, input_dim)))
            p[f"dyn.U_{g}"] = Tensor(rng.child("U", g).uniform(-bound, bound, (coord_dim, coord_dim)))
            p[f"dyn.b_{g}"] = Tensor(rng.child("b", g).uniform(-bound, bound, (coord_dim,)))
        p["dyn.ln.gain"] = Tensor(np.ones(coord_dim, dtype=np.float32))
        p["dyn.ln.bias"] = Tensor(np.zeros(coord_dim, dtype=np.float32))
        p["dyn.W_p"] = Tensor(rng.child("W_p").uniform(-bound, bound, (coord_dim, coord_dim)))
        for name, t in p.items():
            t.requires_grad = True
            t.name = name
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    @property
    def no_decay(self) -> frozenset[str]:
        return frozenset({"dyn.ln.gain", "dyn.ln.bias"})


def gru_cell(dyn: CoordDynamics, h_in, z) -> Tensor:
    h_in, z = as_tensor(h_in), as_tensor(z)
    if h_in.shape[-1] != dyn.input_dim or z.shape[-1] != dyn.coord_dim:
        raise ContractError(f"gru_cell: got input {h_in.shape} and state {z.shape}")
    p = dyn.params

    def lin(name, x):
        return matmul(x, p[name].transpose())

    r = activation(lin("dyn.W_r", h_in) + lin("dyn.U_r", z) + p["dyn.b_r"], "sigmoid")
    u = activation(lin("dyn.W_u", h_in) + lin("dyn.U_u", z) + p["dyn.b_u"], "sigmoid")
    n = activation(lin("dyn.W_n", h_in) + r * lin("dyn.U_n", z) + p["dyn.b_n"], "tanh")
    return (1.0 - u) * n + u * z


def coord_update(dyn: CoordDynamics, z, pooled_hidden) -> Tensor:
    """``tanh(W_p LN(GRU(pooled, z)))``; returns the new coordinate ``[B, d_z]``."""
    g = gru_cell(dyn, pooled_hidden, z)
    h = layer_norm(g, dyn.params["dyn.ln.gain"], dyn.params["dyn.ln.bias"])
    return activation(matmul(h, dyn.params["dyn.W_p"].transpose()), "tanh")


@dataclass
class PassDiagnostics:
    decisions: list[GatingDecision]
    first_pass_decisions: list[GatingDecision]
    pooled: np.ndarray

    def entropy(self) -> np.ndarray:
        """``[L, B]`` Shannon entropy of the selected weights (nats)."""
        w = np.stack([d.weights.data.astype(np.float64) for d in self.decisions])
        logs = np.log(np.where(w > 0, w, 1.0))
        return -(w * logs).sum(axis=-1)


def routing(model, z, store=None) -> list[GatingDecision]:
    return gate_topk(model.gating_logits(z, store), model.top_k)


def two_pass_forward(model, tokens, loss_mask, store=None, z_override=None):
    """Run both passes and return ``(nll, z1, diagnostics)``.

    Pass 1 runs at ``z0 = 0`` without recording; its final hidden states are
    mean-pooled over non-pad positions and fed to the dynamics to get ``z1``.
    Pass 2 routes with ``z1`` and scores next-token NLL on ``loss_mask``.
    ``z_override`` skips the dynamics and routes pass 2 with the given ``z``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    B = tokens.shape[0]
    pad_mask = tokens != PAD
    z0 = Tensor(np.zeros((B, model.coord_dim)))
    with no_grad():
        first = routing(model, z0, store)
        _, hidden = model.backbone.forward(tokens, model.banks, model.registry_for(first))
        pooled = mean_pool(hidden, pad_mask).detach()
    if z_override is not None:
        z1 = as_tensor(np.broadcast_to(np.asarray(z_override, dtype=np.float32), (B, model.coord_dim)))
    elif model.fixed_z is not None:
        z1 = Tensor(np.broadcast_to(model.fixed_z, (B, model.coord_dim)))
    else:
        z1 = coord_update(model.dynamics, z0, pooled)
    decisions = routing(model, z1, store)
    logits, _ = model.backbone.forward(tokens, model.banks, model.registry_for(decisions))
    targets, mask = next_token_targets(tokens, np.asarray(loss_mask, dtype=bool))
    nll = cross_entropy_nll(logits, targets, mask)
    return nll, z1, PassDiagnostics(decisions, first, pooled.data)


def replay_module_outputs(model, tokens, z, store=None) -> dict[str, np.ndarray]:
    """Wrapped-projection outputs of a pass routed at coordinates ``z``."""
    taps: dict[str, np.ndarray] = {}
    with no_grad():
        decisions = routing(model, Tensor(np.asarray(z, dtype=np.float32)), store)
        model.backbone.forward(np.asarray(tokens, dtype=np.int64), model.banks,
                               model.registry_for(decisions), taps=taps)
    return taps


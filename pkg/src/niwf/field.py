"""The weight field: capability coordinate -> per-layer gating logits."""

from __future__ import annotations

import numpy as np

from .adapters import GatingDecision, kaiming_uniform
from .errors import ContractError
from .rng import Rng
from .tensor import Tensor, activation, as_tensor, layer_norm, matmul, softmax, top_k

# Logit given to bases appended by capacity expansion, so they start unselected.
EXPANSION_LOGIT = -10.0


class WeightField:
    """``W3 gelu(W2 gelu(W1 LN(z) + b1) + b2) + b3`` reshaped to ``[B, L, N_b]``."""

    def __init__(self, coord_dim: int, hidden: int, n_layers: int, n_bases: int, rng: Rng,
                 share_layers: bool = False):
        self.coord_dim = coord_dim
        self.hidden = hidden
        self.n_layers = n_layers
        self.n_bases = n_bases
        self.share_layers = share_layers
        rows = n_bases if share_layers else n_layers * n_bases
        self.params = {
            "field.ln.gain": Tensor(np.ones(coord_dim, dtype=np.float32)),
            "field.ln.bias": Tensor(np.zeros(coord_dim, dtype=np.float32)),
            "field.W1": Tensor(kaiming_uniform(rng.child("W1"), (hidden, coord_dim), coord_dim)),
            "field.b1": Tensor(np.zeros(hidden, dtype=np.float32)),
            "field.W2": Tensor(kaiming_uniform(rng.child("W2"), (hidden, hidden), hidden)),
            "field.b2": Tensor(np.zeros(hidden, dtype=np.float32)),
            "field.W3": Tensor(kaiming_uniform(rng.child("W3"), (rows, hidden), hidden)),
            "field.b3": Tensor(np.zeros(rows, dtype=np.float32)),
        }
        for name, t in self.params.items():
            t.requires_grad = True
            t.name = name

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    @property
    def no_decay(self) -> frozenset[str]:
        return frozenset({"field.ln.gain", "field.ln.bias"})

    def expand(self, extra: int) -> None:
        """Grow every layer's logit block by ``extra`` columns fixed at EXPANSION_LOGIT."""
        L = 1 if self.share_layers else self.n_layers
        W3 = self.params["field.W3"].data.reshape(L, self.n_bases, self.hidden)
        b3 = self.params["field.b3"].data.reshape(L, self.n_bases)
        W3 = np.concatenate([W3, np.zeros((L, extra, self.hidden), np.float32)], axis=1)
        b3 = np.concatenate([b3, np.full((L, extra), EXPANSION_LOGIT, np.float32)], axis=1)
        self.n_bases += extra
        self.params["field.W3"] = Tensor(W3.reshape(-1, self.hidden), requires_grad=True, name="field.W3")
        self.params["field.b3"] = Tensor(b3.reshape(-1), requires_grad=True, name="field.b3")


def field_forward(field: WeightField, z) -> Tensor:
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != field.coord_dim:
        raise ContractError(f"field_forward: expected z of shape [B, {field.coord_dim}], got {z.shape}")
    p = field.params
    h = layer_norm(z, p["field.ln.gain"], p["field.ln.bias"])
    h = activation(matmul(h, p["field.W1"].transpose()) + p["field.b1"], "gelu")
    h = activation(matmul(h, p["field.W2"].transpose()) + p["field.b2"], "gelu")
    out = matmul(h, p["field.W3"].transpose()) + p["field.b3"]
    B = z.shape[0]
    if field.share_layers:
        zeros = np.zeros((1, field.n_layers, 1), dtype=out.data.dtype)
        return out.reshape(B, 1, field.n_bases) + zeros
    return out.reshape(B, field.n_layers, field.n_bases)


def gate_topk(logits: Tensor, k: int) -> list[GatingDecision]:
    """Per layer: top-k bases and a softmax over exactly the selected logits."""
    values, idx = top_k(logits, k)
    weights = softmax(values, axis=-1)
    return [GatingDecision(idx[:, layer, :], weights[:, layer, :])
            for layer in range(logits.shape[1])]

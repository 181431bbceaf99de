"""Assembly of backbone, adapter banks, weight field and coordinate dynamics."""

from __future__ import annotations

import numpy as np

from .adapters import AdapterBank, GatingRegistry, expand_bank, init_bank
from .backbone import Backbone, BackboneConfig, build_registry
from .config import NIWFConfig
from .dynamics import CoordDynamics
from .field import WeightField, field_forward
from .region import CommitStore, override_logits
from .rng import Rng
from .tensor import Tensor


class NIWFModel:
    def __init__(self, config: NIWFConfig):
        self.config = config
        root = Rng(config.seed)
        self.rng = root.child("model-runtime")
        self.backbone = Backbone(BackboneConfig.from_config(config), root.child("backbone"))
        self.registry = build_registry(self.backbone.cfg, config.target_modules)
        n_bases = config.effective_num_bases
        self.banks: dict[str, AdapterBank] = {
            e.key: init_bank(e.d_in, e.d_out, config.rank, n_bases, config.alpha,
                             root.child("bank", e.key), name=f"bank.{e.key}")
            for e in self.registry
        }
        self.field = WeightField(config.coord_dim, config.field_hidden, config.n_layers, n_bases,
                                 root.child("field"), share_layers=config.share_layers)
        self.dynamics = CoordDynamics(config.d_model, config.coord_dim, root.child("dynamics"))
        self.fixed_z = (root.child("fixed_z").uniform(-1.0, 1.0, (config.coord_dim,))
                        if config.fixed_coordinates else None)
        self._dynamics_frozen = False
        self.top_k = config.effective_top_k

    # -- properties --------------------------------------------------------
    @property
    def coord_dim(self) -> int:
        return self.config.coord_dim

    @property
    def num_bases(self) -> int:
        return self.field.n_bases

    @property
    def dynamics_frozen(self) -> bool:
        return self._dynamics_frozen

    @dynamics_frozen.setter
    def dynamics_frozen(self, flag: bool) -> None:
        self._dynamics_frozen = bool(flag)
        for t in self.dynamics.params.values():
            t.requires_grad = not flag
            t.grad = None

    # -- routing -------------------------------------------------------------
    def registry_for(self, decisions) -> GatingRegistry:
        names = [n for n in self.config.target_modules]
        return GatingRegistry.from_layers(decisions, names)

    def gating_logits(self, z, store: CommitStore | None = None) -> Tensor:
        live = field_forward(self.field, z)
        if store is not None and self.config.hard_lock and len(store):
            z_np = z.data if isinstance(z, Tensor) else np.asarray(z)
            return override_logits(live, z_np, store)
        return live

    # -- parameters ----------------------------------------------------------
    def trainable_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for bank in self.banks.values():
            out.update(bank.parameters())
        out.update(self.field.parameters())
        if self.fixed_z is None and not self.dynamics_frozen:
            out.update(self.dynamics.parameters())
        return out

    def no_decay(self) -> frozenset[str]:
        return self.field.no_decay | self.dynamics.no_decay

    def frozen_masks(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for bank in self.banks.values():
            if not bank.trainable_mask.all():
                out.update(bank.frozen_masks())
        return out

    def zero_grad(self) -> None:
        for t in self.trainable_parameters().values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every tensor that defines the model, in a fixed order."""
        out = {k: v.data for k, v in self.backbone.parameters().items()}
        for key, bank in self.banks.items():
            out[bank.A.name] = bank.A.data
            out[bank.B.name] = bank.B.data
            out[f"bank.{key}.trainable"] = bank.trainable_mask.astype(np.float32)
        out.update({k: v.data for k, v in self.field.params.items()})
        out.update({k: v.data for k, v in self.dynamics.params.items()})
        if self.fixed_z is not None:
            out["fixed_z"] = self.fixed_z
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.backbone.params.items():
            v.data = arrays[f"backbone.{k}"].copy()
        for key, bank in self.banks.items():
            bank.A.data = arrays[bank.A.name].copy()
            bank.B.data = arrays[bank.B.name].copy()
            bank.trainable_mask = arrays[f"bank.{key}.trainable"] != 0
        for k, v in self.field.params.items():
            v.data = arrays[k].copy()
        rows = self.field.params["field.W3"].shape[0]
        self.field.n_bases = rows if self.field.share_layers else rows // self.field.n_layers
        for k, v in self.dynamics.params.items():
            v.data = arrays[k].copy()
        if self.fixed_z is not None:
            self.fixed_z = arrays["fixed_z"].copy()

    # -- capacity --------------------------------------------------------------
    def expand(self, extra_bases: int) -> None:
        """Append ``extra_bases`` to every bank and grow the field output head."""
        for key in list(self.banks):
            self.banks[key] = expand_bank(self.banks[key], extra_bases, self.rng.child("expand", key,
                                                                                       self.num_bases))
        self.field.expand(extra_bases)

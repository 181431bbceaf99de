"""Run configuration with strict JSON loading.

Defaults are the desk-scale values. The full-scale Mistral-7B values are
listed in ``FULL_SCALE`` for reference and for the memory calculator.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

MODULE_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")

MODES = (
    "niwf_soft",
    "niwf_hard",
    "no_lock",
    "no_sep",
    "no_dynamics",
    "dense_gating",
    "single_adapter_seq",
)

FULL_SCALE = {
    "rank": 8,
    "num_bases": 16,
    "top_k": 8,
    "alpha": 16.0,
    "coord_dim": 64,
    "field_hidden": 256,
    "max_seq_len": 256,
    "train_examples": 4000,
    "val_examples": 400,
    "learning_rate": 2e-4,
    "grad_accum": 16,
    "batch_size": 1,
    "lambda_lock": 5.0,
    "lambda_sep": 0.01,
    "lambda_budget": 1e-4,
    "anchors_per_region": 256,
    "region_quantile": 0.95,
}


@dataclass
class NIWFConfig:
    # backbone
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 64
    max_seq_len: int = 64
    # adapter banks
    rank: int = 4
    num_bases: int = 8
    top_k: int = 4
    alpha: float = 8.0
    target_modules: list[str] = field(default_factory=lambda: list(MODULE_NAMES))
    # weight field and dynamics
    coord_dim: int = 8
    field_hidden: int = 32
    share_layers: bool = False
    freeze_dynamics_after_commit: bool = False
    # data
    train_examples: int = 2000
    val_examples: int = 200
    payload_min: int = 4
    payload_max: int = 8
    # optimisation
    learning_rate: float = 1e-2
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05
    grad_clip: float = 1.0
    batch_size: int = 8
    grad_accum: int = 1
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3
    steps_per_task: int = 400
    # objective
    lambda_lock: float = 5.0
    lambda_sep: float = 0.01
    lambda_budget: float = 1e-4
    margin: float = 0.0
    # commitment
    anchors_per_region: int = 64
    region_quantile: float = 0.95
    # run
    mode: str = "niwf_soft"
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown value {self.mode!r}")
        for name in self.target_modules:
            if name not in MODULE_NAMES:
                raise ConfigError(f"target_modules: unknown module {name!r}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model: must be divisible by n_heads")
        positive = ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len", "rank",
                    "num_bases", "top_k", "coord_dim", "field_hidden", "batch_size", "grad_accum",
                    "anchors_per_region")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive")
        if self.top_k > self.num_bases:
            raise ConfigError("top_k: must not exceed num_bases")
        for name in ("lambda_lock", "lambda_sep", "lambda_budget", "margin", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if not 0 < self.region_quantile < 1:
            raise ConfigError("region_quantile: must lie in (0, 1)")
        if not 1 <= self.payload_min <= self.payload_max:
            raise ConfigError("payload_min: must satisfy 1 <= payload_min <= payload_max")
        if 2 * self.payload_max + 2 > self.max_seq_len:
            raise ConfigError("payload_max: examples would exceed max_seq_len")

    # -- mode-resolved hyperparameters --------------------------------------
    @property
    def effective_num_bases(self) -> int:
        return 1 if self.mode == "single_adapter_seq" else self.num_bases

    @property
    def effective_top_k(self) -> int:
        if self.mode == "single_adapter_seq":
            return 1
        if self.mode == "dense_gating":
            return self.effective_num_bases
        return self.top_k

    @property
    def hard_lock(self) -> bool:
        return self.mode == "niwf_hard"

    @property
    def fixed_coordinates(self) -> bool:
        return self.mode == "no_dynamics"

    def loss_weights(self, task_index: int) -> "dict[str, float]":
        """Objective weights for the ``task_index``-th task (0-based)."""
        first = task_index == 0
        lock = 0.0 if first or self.mode in ("no_lock", "single_adapter_seq") else self.lambda_lock
        sep = 0.0 if first or self.mode in ("no_sep", "single_adapter_seq") else self.lambda_sep
        return {"lock": lock, "sep": sep, "budget": self.lambda_budget, "margin": self.margin}

    # -- (de)serialisation --------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NIWFConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"{key}: unknown configuration key")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "NIWFConfig":
        try:
            text = Path(path).read_text()
        except OSError:
            raise
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(d)

    def replace(self, **kw) -> "NIWFConfig":
        return dataclasses.replace(self, **kw)

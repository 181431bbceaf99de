"""Region commitment and functional locking.

After a task finishes, the coordinates its training inputs map to are
summarised by a Gaussian, thresholded at an empirical Mahalanobis quantile,
and a set of in-region anchors is snapshotted through the weight field. The
lock loss then ties the field to those snapshots during later training.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError, NIWFError
from .field import EXPANSION_LOGIT, WeightField, field_forward
from .rng import Rng
from .tensor import Tensor, as_tensor, no_grad, relu, sqrt, top_k, tsum


def _chol_inverse(sigma: np.ndarray) -> np.ndarray:
    s = np.asarray(sigma, dtype=np.float64)
    c = cho_factor(s, lower=True)
    inv = cho_solve(c, np.eye(s.shape[0]))
    return 0.5 * (inv + inv.T)


@dataclass
class CommittedRegion:
    region_id: str
    task: str
    mu: np.ndarray           # [d_z] float32
    sigma: np.ndarray        # [d_z, d_z] float32
    tau: float
    anchors: np.ndarray      # [M, d_z] float32
    snapshot: np.ndarray     # [M, L, N_b] float32
    base_mask: np.ndarray    # [L, N_b] bool
    created_step: int = 0
    coords: np.ndarray | None = None
    _inv: np.ndarray | None = dc_field(default=None, repr=False, compare=False)

    @property
    def sigma_inv(self) -> np.ndarray:
        if self._inv is None:
            self._inv = _chol_inverse(self.sigma)
        return self._inv

    @property
    def num_anchors(self) -> int:
        return self.anchors.shape[0]

    @property
    def coord_dim(self) -> int:
        return self.mu.shape[0]

    def distances(self, z) -> np.ndarray:
        return mahalanobis(z, self.mu, self.sigma_inv)

    def contains(self, z) -> np.ndarray:
        return self.distances(z) <= self.tau


class CommitStore:
    """Ordered set of committed regions with a monotone version counter."""

    def __init__(self):
        self.regions: list[CommittedRegion] = []
        self.version = 0

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    def get(self, region_id: str) -> CommittedRegion:
        for r in self.regions:
            if r.region_id == region_id:
                return r
        raise KeyError(f"no committed region {region_id!r}")

    def add(self, region: CommittedRegion) -> None:
        if region.region_id in self.ids():
            raise ContractError(f"region {region.region_id!r} already committed")
        self.regions.append(region)
        self.version += 1

    def remove(self, region_id: str) -> CommittedRegion:
        region = self.get(region_id)
        self.regions = [r for r in self.regions if r.region_id != region_id]
        self.version += 1
        return region


def mahalanobis(z, mu, sigma_inv) -> np.ndarray:
    """``sqrt((z - mu)^T Sigma^-1 (z - mu))`` row-wise, in float64."""
    diff = np.asarray(z, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    q = np.einsum("...i,ij,...j->...", diff, np.asarray(sigma_inv, dtype=np.float64), diff)
    return np.sqrt(np.maximum(q, 0.0))


def quantile_threshold(distances, quantile: float) -> float:
    """Empirical quantile, linear between order statistics at index ``(n - 1) q``."""
    return float(np.quantile(np.asarray(distances, dtype=np.float64), quantile, method="linear"))


def fit_region(coords, quantile: float = 0.95):
    """MLE Gaussian plus trace-scaled ridge; threshold at the empirical quantile.

    Returns ``(mu, sigma, tau)`` with ``mu`` and ``sigma`` in float32.
    """
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"fit_region: coords must be [N, d_z], got {c.shape}")
    n, d = c.shape
    if n < d + 2:
        raise ContractError(f"fit_region: need at least d_z + 2 = {d + 2} coordinates, got {n}")
    mu = c.mean(axis=0)
    diff = c - mu
    cov = diff.T @ diff / n
    ridge = 1e-6 * np.trace(cov) / d + 1e-9
    sigma = cov + ridge * np.eye(d)
    mu32 = mu.astype(np.float32)
    sigma32 = (0.5 * (sigma + sigma.T)).astype(np.float32)
    dist = mahalanobis(np.asarray(coords, dtype=np.float32), mu32, _chol_inverse(sigma32))
    tau = quantile_threshold(dist, quantile)
    return mu32, sigma32, tau


def _candidate_draws(mu, sigma, n: int, rng: Rng) -> np.ndarray:
    L = np.linalg.cholesky(np.asarray(sigma, dtype=np.float64))
    eps = rng.standard_normal64((n, mu.shape[0]))
    return (np.asarray(mu, dtype=np.float64) + eps @ L.T).astype(np.float32)


def sample_anchors(mu, sigma, tau: float, M: int, rng: Rng, fallback_coords=None) -> np.ndarray:
    """Rejection-sample ``M`` anchors from ``N(mu, sigma)`` with ``d_M <= tau``.

    After ``100 * M`` draws without enough acceptances, falls back to a uniform
    subsample (without replacement, padded by resampling) of ``fallback_coords``.
    """
    if M < 1:
        raise ContractError("sample_anchors: M must be >= 1")
    inv = _chol_inverse(sigma)
    accepted: list[np.ndarray] = []
    n_acc, drawn = 0, 0
    while n_acc < M and drawn < 100 * M:
        cand = _candidate_draws(mu, sigma, M, rng)
        drawn += M
        keep = cand[mahalanobis(cand, mu, inv) <= tau]
        accepted.append(keep)
        n_acc += len(keep)
    if n_acc >= M:
        return np.concatenate(accepted)[:M]
    if fallback_coords is None:
        raise NIWFError("anchor rejection sampling stalled and no fallback coordinates given")
    fb = np.asarray(fallback_coords, dtype=np.float32)
    inside = fb[mahalanobis(fb, mu, inv) <= tau]
    pool = inside if len(inside) else fb
    take_n = min(M, len(pool))
    idx = rng.choice(len(pool), take_n, replace=False)
    if take_n < M:
        idx = np.concatenate([idx, rng.choice(len(pool), M - take_n, replace=True)])
    return pool[idx].copy()


def acceptance_rate(mu, sigma, tau: float, n_draws: int, rng: Rng) -> float:
    """Fraction of ``n_draws`` Gaussian candidates the rejection sampler would keep."""
    cand = _candidate_draws(mu, sigma, n_draws, rng)
    return float((mahalanobis(cand, mu, _chol_inverse(sigma)) <= tau).mean())


def snapshot_field(field: WeightField, anchors) -> np.ndarray:
    with no_grad():
        return field_forward(field, Tensor(anchors)).data.copy()


def committed_base_mask(snapshot: np.ndarray, k: int) -> np.ndarray:
    """Per layer, the union of the top-k indices over all anchors."""
    _, idx = top_k(Tensor(snapshot), k)
    M, L, _ = snapshot.shape
    mask = np.zeros(snapshot.shape[1:], dtype=bool)
    layer = np.broadcast_to(np.arange(L)[None, :, None], idx.shape)
    mask[layer, idx] = True
    return mask


def _anchor_outputs(field: WeightField, region: CommittedRegion) -> Tensor:
    out = field_forward(field, Tensor(region.anchors))
    n = region.snapshot.shape[-1]
    return out if out.shape[-1] == n else out[:, :, :n]


def lock_loss(field: WeightField, store: CommitStore) -> Tensor:
    """Sum over regions of the anchor-mean squared L2 deviation from the snapshot."""
    total = None
    for region in store:
        diff = _anchor_outputs(field, region) - region.snapshot
        term = tsum(diff * diff) * (1.0 / region.num_anchors)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def separation_loss(z, store: CommitStore, margin: float = 0.0) -> Tensor:
    """Batch mean of ``sum_regions max(0, tau + margin - d_M(z))**2``."""
    z = as_tensor(z)
    total = None
    for region in store:
        inv = Tensor(region.sigma_inv)
        diff = z - region.mu
        q = tsum((diff @ inv) * diff, axis=-1)
        hinge = relu(-sqrt(q) + (region.tau + margin))
        term = tsum(hinge * hinge) * (1.0 / z.shape[0])
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def verify_commit(field: WeightField, region: CommittedRegion) -> float:
    """Max-abs deviation of live field outputs from the snapshot over anchors."""
    with no_grad():
        out = _anchor_outputs(field, region).data
    return float(np.abs(out.astype(np.float64) - region.snapshot).max())


def apply_hard_lock(store: CommitStore, banks: dict) -> None:
    """Freeze every base that some committed region routes through (per layer)."""
    for bank_key, bank in banks.items():
        layer = int(bank_key.split(".")[0])
        mask = np.ones(bank.num_bases, dtype=bool)
        for region in store:
            committed = region.base_mask[layer]
            mask[: committed.shape[0]] &= ~committed
        bank.trainable_mask = mask


def override_logits(live: Tensor, z: np.ndarray, store: CommitStore) -> Tensor:
    """Replace field logits by the nearest anchor's snapshot for in-region rows.

    Regions are tried in commit order; the first containing region wins.
    """
    if not len(store):
        return live
    z = np.asarray(z, dtype=np.float32)
    B, L, N = live.shape
    fixed = np.zeros(live.shape, dtype=live.data.dtype)
    hit = np.zeros(B, dtype=bool)
    for region in store:
        d = region.distances(z)
        rows = np.nonzero((d <= region.tau) & ~hit)[0]
        for row in rows:
            da = mahalanobis(region.anchors, z[row], region.sigma_inv)
            snap = region.snapshot[int(np.argmin(da))]
            fixed[row, :, : snap.shape[-1]] = snap
            fixed[row, :, snap.shape[-1]:] = EXPANSION_LOGIT
            hit[row] = True
    if not hit.any():
        return live
    keep = (~hit).astype(live.data.dtype)[:, None, None]
    return live * keep + fixed


def commit(model, store: CommitStore, task_coords, task: str, created_step: int = 0) -> CommittedRegion:
    """Fit, sample anchors, snapshot the field and append the region to ``store``."""
    cfg = model.config
    coords = np.asarray(task_coords, dtype=np.float32)
    mu, sigma, tau = fit_region(coords, cfg.region_quantile)
    rng = Rng(cfg.seed).child("anchors", task)
    anchors = sample_anchors(mu, sigma, tau, cfg.anchors_per_region, rng, fallback_coords=coords)
    snapshot = snapshot_field(model.field, anchors)
    region = CommittedRegion(
        region_id=task,
        task=task,
        mu=mu,
        sigma=sigma,
        tau=tau,
        anchors=anchors,
        snapshot=snapshot,
        base_mask=committed_base_mask(snapshot, model.top_k),
        created_step=created_step,
        coords=coords,
    )
    store.add(region)
    if cfg.hard_lock:
        apply_hard_lock(store, model.banks)
    if cfg.freeze_dynamics_after_commit:
        model.dynamics_frozen = True
    return region


def rollback(store: CommitStore, region_id: str, model=None) -> CommitStore:
    """Drop a region from all lock/separation terms; hard-lock masks are recomputed."""
    store.remove(region_id)
    if model is not None and model.config.hard_lock:
        apply_hard_lock(store, model.banks)
    return store

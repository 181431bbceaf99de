"""Analytical memory model and run-time diagnostics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import MODULE_NAMES, NIWFConfig

# Per-module (d_in, d_out) as tabulated for Mistral-7B in the adapter memory derivation.
MISTRAL_MODULE_DIMS = {
    "q_proj": (4096, 4096),
    "k_proj": (4096, 1024),
    "v_proj": (4096, 1024),
    "o_proj": (1024, 4096),
    "gate_proj": (4096, 14336),
    "up_proj": (4096, 14336),
    "down_proj": (14336, 4096),
}


@dataclass
class MemorySpec:
    n_layers: int
    module_dims: dict[str, tuple[int, int]]
    n_bases: int
    rank: int
    top_k: int
    seq_len: int
    batch: int = 1
    anchors: int = 256
    adapter_width: int = 4
    optimizer_multiplier: int = 2
    activation_widths: tuple[int, ...] = (4, 2)
    snapshot_width: int = 4

    def __post_init__(self):
        ints = [self.n_layers, self.n_bases, self.rank, self.top_k, self.seq_len, self.batch,
                self.anchors, self.adapter_width, self.optimizer_multiplier, self.snapshot_width,
                *self.activation_widths]
        for dims in self.module_dims.values():
            ints.extend(dims)
        if any(int(v) != v or v <= 0 for v in ints):
            raise ValueError("MemorySpec entries must be positive integers")

    @classmethod
    def mistral(cls) -> "MemorySpec":
        return cls(n_layers=32, module_dims=dict(MISTRAL_MODULE_DIMS), n_bases=16, rank=8,
                   top_k=8, seq_len=256, batch=1, anchors=256)

    @classmethod
    def from_config(cls, cfg: NIWFConfig) -> "MemorySpec":
        from .backbone import BackboneConfig, module_dims
        bc = BackboneConfig.from_config(cfg)
        dims = {n: module_dims(bc, n) for n in MODULE_NAMES if n in cfg.target_modules}
        return cls(n_layers=cfg.n_layers, module_dims=dims, n_bases=cfg.effective_num_bases,
                   rank=cfg.rank, top_k=cfg.effective_top_k, seq_len=cfg.max_seq_len,
                   batch=cfg.batch_size, anchors=cfg.anchors_per_region)

    @classmethod
    def from_dict(cls, d: dict) -> "MemorySpec":
        d = dict(d)
        d["module_dims"] = {k: tuple(v) for k, v in d["module_dims"].items()}
        if "activation_widths" in d:
            d["activation_widths"] = tuple(d["activation_widths"])
        return cls(**d)


def _gb(n_bytes: int) -> str:
    return f"{n_bytes / 1e9:.2f}"


@dataclass
class MemoryReport:
    wrapped_modules: int
    adapter_params: int
    adapter_bytes: int
    optimizer_bytes: int
    adapter_plus_optimizer_bytes: int
    active_params_per_forward: int
    snapshot_bytes: int
    gather: list[dict]
    scaling: list[dict]
    gb: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def stored_params(spec: MemorySpec, n_bases: int) -> int:
    return spec.n_layers * sum(n_bases * spec.rank * (i + o) for i, o in spec.module_dims.values())


def active_params(spec: MemorySpec) -> int:
    return spec.n_layers * sum(spec.top_k * spec.rank * (i + o) for i, o in spec.module_dims.values())


def memory_report(spec: MemorySpec) -> MemoryReport:
    """Exact integer accounting of adapter, optimizer, snapshot and gather memory."""
    params = stored_params(spec, spec.n_bases)
    adapter_bytes = params * spec.adapter_width
    opt_bytes = spec.optimizer_multiplier * adapter_bytes
    snapshot = spec.anchors * spec.n_layers * spec.n_bases * spec.snapshot_width
    gather = []
    for name, (_, d_out) in spec.module_dims.items():
        per_seq = spec.batch * spec.top_k * d_out * spec.rank
        gather.append({
            "module": name,
            "d_out": d_out,
            "token_level_bytes": {str(w): per_seq * spec.seq_len * w for w in spec.activation_widths},
            "sequence_level_bytes": {str(w): per_seq * w for w in spec.activation_widths},
            "ratio": spec.seq_len,
        })
    grid = sorted({spec.top_k, spec.n_bases, *(spec.top_k * m for m in (2, 4, 8, 16))})
    scaling = [{"n_bases": n, "stored_params": stored_params(spec, n), "active_params": active_params(spec)}
               for n in grid]
    return MemoryReport(
        wrapped_modules=spec.n_layers * len(spec.module_dims),
        adapter_params=params,
        adapter_bytes=adapter_bytes,
        optimizer_bytes=opt_bytes,
        adapter_plus_optimizer_bytes=adapter_bytes + opt_bytes,
        active_params_per_forward=active_params(spec),
        snapshot_bytes=snapshot,
        gather=gather,
        scaling=scaling,
        gb={"adapter": _gb(adapter_bytes), "optimizer": _gb(opt_bytes),
            "adapter_plus_optimizer": _gb(adapter_bytes + opt_bytes)},
    )


def gating_entropy(weights) -> np.ndarray:
    """Shannon entropy (nats) of each row of selected gating weights."""
    w = np.asarray(getattr(weights, "data", weights), dtype=np.float64)
    return -(w * np.log(np.where(w > 0, w, 1.0))).sum(axis=-1)


def entropy_summary(entropy: np.ndarray) -> list[dict]:
    """Per layer mean and quartiles of an ``[L, N]`` entropy table."""
    rows = []
    for layer, e in enumerate(entropy):
        q25, q50, q75 = np.quantile(e, [0.25, 0.5, 0.75])
        rows.append({"layer": layer, "mean": float(e.mean()), "q25": float(q25),
                     "median": float(q50), "q75": float(q75)})
    return rows


def coord_stats(coords, region, bins: int = 20, edges=None) -> dict:
    """Mahalanobis geometry of ``coords`` relative to a committed region."""
    d = region.distances(coords)
    if edges is None:
        edges = np.linspace(0.0, max(float(d.max()), region.tau) * 1.05 + 1e-12, bins + 1)
    hist, _ = np.histogram(d, bins=edges)
    inside = float((d <= region.tau).mean())
    return {"distances": d, "histogram": hist, "edges": edges,
            "inside_fraction": inside, "outside_fraction": 1.0 - inside}


def compare_coords(coords_a, coords_b, region, bins: int = 20) -> dict:
    """Histograms of both coordinate sets on shared bins, plus containment fractions."""
    da, db = region.distances(coords_a), region.distances(coords_b)
    top = max(float(da.max()), float(db.max()), region.tau) * 1.05 + 1e-12
    edges = np.linspace(0.0, top, bins + 1)
    a = coord_stats(coords_a, region, edges=edges)
    b = coord_stats(coords_b, region, edges=edges)
    return {"edges": edges, "hist_a": a["histogram"], "hist_b": b["histogram"],
            "a_inside_fraction": a["inside_fraction"], "b_outside_fraction": b["outside_fraction"]}


def export_coords(coords, labels, path, store=None) -> Path:
    """CSV: label, z_0..z_{d-1}, then the Mahalanobis distance to each region."""
    coords = np.asarray(coords, dtype=np.float32)
    regions = list(store) if store is not None else []
    path = Path(path)
    dists = [r.distances(coords) for r in regions]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"z{i}" for i in range(coords.shape[1])),
                    *(f"dM_{r.region_id}" for r in regions)])
        for i, row in enumerate(coords):
            w.writerow([labels[i], *(repr(float(v)) for v in row),
                        *(repr(float(d[i])) for d in dists)])
    return path


def read_coords(path) -> tuple[list[str], np.ndarray, list[str]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    d_z = sum(1 for h in header if h.startswith("z"))
    labels = [r[0] for r in rows[1:]]
    z = np.array([[float(v) for v in r[1:1 + d_z]] for r in rows[1:]], dtype=np.float32)
    return labels, z, header


def polyline_svg(series: dict[str, list[tuple[float, float]]], title: str,
                 width: int = 480, height: int = 300) -> str:
    """A bare line chart with axes; one polyline per series."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs) or 1.0
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    m = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]

    def sx(x):
        return m + (x - x0) / (x1 - x0) * (width - 2 * m)

    def sy(y):
        return height - m - (y - y0) / (y1 - y0) * (height - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
           f'<text x="{m}" y="{height - m + 15}" font-size="10">{x0:g}</text>',
           f'<text x="{width - m}" y="{height - m + 15}" font-size="10" text-anchor="end">{x1:g}</text>',
           f'<text x="{m - 4}" y="{height - m}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{m - 4}" y="{m + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (name, s) in enumerate(series.items()):
        c = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{c}" points="{coords}"/>')
        out.append(f'<text x="{width - m}" y="{m + 14 * i}" font-size="10" fill="{c}" '
                   f'text-anchor="end">{name}</text>')
    out.append("</svg>")
    return "\n".join(out)

"""On-disk formats: checkpoints, commit stores, corpora.

A checkpoint directory holds ``manifest.json`` (format version, config echo,
an ordered tensor index, scalar state) and ``tensors.bin`` (raw little-endian
float32, row-major, in index order). Commit stores live in ``commits.json``
with one ``region_<id>.bin`` blob per region in the same encoding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import NIWFConfig
from .errors import ChecksumError, PersistenceError, TruncatedError, VersionError
from .optim import AdamWState
from .region import CommitStore, CommittedRegion
from .rng import Rng
from .tasks import Example

FORMAT_VERSION = 1
DTYPE_TAG = "f32le"
_LE32 = np.dtype("<f4")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise TruncatedError(f"{path}: unreadable JSON ({exc})") from exc


def _check_version(doc: dict, path: Path) -> None:
    v = doc.get("format_version")
    if v != FORMAT_VERSION:
        raise VersionError(f"{path}: format_version {v!r}, expected {FORMAT_VERSION}")


# -- raw tensor blobs -------------------------------------------------------

def write_blob(arrays: dict[str, np.ndarray], path: Path) -> list[dict]:
    """Concatenate ``arrays`` as little-endian float32; return the index."""
    index, offset = [], 0
    with Path(path).open("wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=_LE32).tobytes()
            fh.write(raw)
            index.append({"name": name, "shape": list(np.shape(arr)), "dtype": DTYPE_TAG,
                          "offset": offset, "length": len(raw),
                          "sha256": hashlib.sha256(raw).hexdigest()})
            offset += len(raw)
    return index


def read_blob(index: list[dict], path: Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    out: dict[str, np.ndarray] = {}
    expected = 0
    for entry in index:
        if entry["dtype"] != DTYPE_TAG:
            raise VersionError(f"{path}: unsupported dtype tag {entry['dtype']!r}")
        off, n = entry["offset"], entry["length"]
        if off != expected:
            raise PersistenceError(f"{path}: tensor {entry['name']} is not contiguous")
        if off + n > len(data):
            raise TruncatedError(f"{path}: tensor {entry['name']} runs past end of file "
                                 f"({off + n} > {len(data)} bytes)")
        raw = data[off:off + n]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise ChecksumError(f"{path}: checksum mismatch for tensor {entry['name']}")
        shape = tuple(entry["shape"])
        arr = np.frombuffer(raw, dtype=_LE32).astype(np.float32).reshape(shape)
        out[entry["name"]] = arr
        expected = off + n
    if expected != len(data):
        raise TruncatedError(f"{path}: {len(data) - expected} trailing bytes not in the index")
    return out


# -- commit stores ------------------------------------------------------------

def save_commits(store: CommitStore, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.glob("region_*.bin"):
        old.unlink()
    regions = []
    for r in store:
        blob = f"region_{r.region_id}.bin"
        arrays = {"sigma": r.sigma, "anchors": r.anchors, "snapshot": r.snapshot,
                  "base_mask": r.base_mask.astype(np.float32)}
        if r.coords is not None:
            arrays["coords"] = r.coords
        regions.append({
            "id": r.region_id,
            "task": r.task,
            "mu": [float(v) for v in r.mu],
            "tau": float(r.tau),
            "d_z": int(r.coord_dim),
            "M": int(r.num_anchors),
            "created_step": int(r.created_step),
            "blob": blob,
            "tensors": write_blob(arrays, directory / blob),
        })
    path = directory / "commits.json"
    _dump_json({"format_version": FORMAT_VERSION, "version": store.version, "regions": regions}, path)
    return path


def load_commits(directory) -> CommitStore:
    directory = Path(directory)
    doc = _read_json(directory / "commits.json")
    _check_version(doc, directory / "commits.json")
    store = CommitStore()
    for meta in doc["regions"]:
        arrays = read_blob(meta["tensors"], directory / meta["blob"])
        region = CommittedRegion(
            region_id=meta["id"],
            task=meta["task"],
            mu=np.asarray(meta["mu"], dtype=np.float32),
            sigma=arrays["sigma"],
            tau=float(meta["tau"]),
            anchors=arrays["anchors"],
            snapshot=arrays["snapshot"],
            base_mask=arrays["base_mask"] != 0,
            created_step=int(meta["created_step"]),
            coords=arrays.get("coords"),
        )
        if region.anchors.shape != (meta["M"], meta["d_z"]) or region.mu.shape != (meta["d_z"],):
            raise PersistenceError(f"region {meta['id']}: shapes disagree with commits.json")
        if region.snapshot.shape[0] != meta["M"]:
            raise PersistenceError(f"region {meta['id']}: snapshot/anchor count mismatch")
        store.regions.append(region)
    store.version = int(doc["version"])
    return store


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    model: object
    store: CommitStore
    history: dict
    train_state: object | None


def _adam_meta(adam: AdamWState) -> dict:
    return {"beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
            "weight_decay": adam.weight_decay, "t": adam.t, "no_decay": sorted(adam.no_decay),
            "params": list(adam.m)}


def save_checkpoint(model, store: CommitStore, path, history: dict | None = None,
                    train_state=None) -> Path:
    """Write model, optimizer, RNG, history and commit store under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = dict(model.state_arrays())
    ts_meta = None
    if train_state is not None:
        adam = train_state.adam
        for name in adam.m:
            arrays[f"adam.m.{name}"] = adam.m[name]
            arrays[f"adam.v.{name}"] = adam.v[name]
        ts_meta = {"task": train_state.task, "total_steps": train_state.total_steps,
                   "step": train_state.step, "trace": train_state.trace, "adam": _adam_meta(adam)}
    index = write_blob(arrays, path / "tensors.bin")
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": index,
        "model": {"num_bases": model.num_bases, "dynamics_frozen": model.dynamics_frozen,
                  "backbone_pretrained": model.backbone.pretrained,
                  "backbone_frozen": model.backbone.frozen},
        "rng": model.rng.state(),
        "history": history if history is not None else {},
        "train_state": ts_meta,
    }
    _dump_json(manifest, path / "manifest.json")
    save_commits(store, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    from .model import NIWFModel
    from .protocol import TrainState

    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"no checkpoint at {path} (manifest.json missing)")
    manifest = _read_json(path / "manifest.json")
    _check_version(manifest, path / "manifest.json")
    arrays = read_blob(manifest["tensors"], path / "tensors.bin")
    config = NIWFConfig.from_dict(manifest["config"])
    model = NIWFModel(config)
    meta = manifest["model"]
    extra = meta["num_bases"] - model.num_bases
    if extra > 0:
        model.expand(extra)
    model.load_state_arrays(arrays)
    model.backbone.pretrained = meta["backbone_pretrained"]
    if meta["backbone_frozen"]:
        model.backbone.freeze()
    model.dynamics_frozen = meta["dynamics_frozen"]
    model.rng = Rng.from_state(manifest["rng"])
    store = load_commits(path)

    train_state = None
    ts = manifest["train_state"]
    if ts is not None:
        am = ts["adam"]
        adam = AdamWState(beta1=am["beta1"], beta2=am["beta2"], eps=am["eps"],
                          weight_decay=am["weight_decay"], t=am["t"],
                          no_decay=frozenset(am["no_decay"]))
        for name in am["params"]:
            adam.m[name] = arrays[f"adam.m.{name}"].copy()
            adam.v[name] = arrays[f"adam.v.{name}"].copy()
        train_state = TrainState(ts["task"], ts["total_steps"], ts["step"], adam, list(ts["trace"]))
    return Checkpoint(model, store, manifest["history"], train_state)


# -- corpora ----------------------------------------------------------------------

def save_corpus(examples: list[Example], path) -> Path:
    """One JSON object per line: ``{"tokens": [...], "loss_mask": [...]}``."""
    path = Path(path)
    with path.open("w") as fh:
        for e in examples:
            fh.write(json.dumps({"tokens": list(e.tokens), "loss_mask": [int(b) for b in e.loss_mask]}))
            fh.write("\n")
    return path


def load_corpus(path) -> list[Example]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(Example(tuple(d["tokens"]), tuple(bool(b) for b in d["loss_mask"])))
    return out

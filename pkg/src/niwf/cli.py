"""``niwf`` command line.

Exit codes: 0 success, 2 usage, 3 configuration error, 4 I/O or checkpoint
error, 5 contract violation (bad state or arguments for an operation).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import persistence
from .analysis import MemorySpec, export_coords, memory_report, polyline_svg
from .config import MODES, NIWFConfig
from .errors import ConfigError, NIWFError
from .model import NIWFModel
from .protocol import (commit_stage, eval_stage, new_history, pretrain_stage, run_sequential,
                       train_stage)
from .region import CommitStore, rollback

log = logging.getLogger("niwf")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CONTRACT = 0, 3, 4, 5
CHECKPOINT_DIR = "checkpoint"


def write_json(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_trace(history: dict, path: Path) -> Path:
    cols = ["task", "step", "nll", "lock_loss", "sep_loss", "lr"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for task in history["tasks_done"]:
            for row in history["traces"].get(task, []):
                w.writerow([_fmt(row[c]) for c in cols])
    return path


def write_entropy(extras: dict, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "layer", "mean", "q25", "median", "q75"])
        for task, rows in extras["entropy"].items():
            for r in rows:
                w.writerow([task, r["layer"], *(_fmt(r[k]) for k in ("mean", "q25", "median", "q75"))])
    return path


def write_plots(history: dict, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rows = [r for t in history["tasks_done"] for r in history["traces"].get(t, [])]
    for key, title in (("nll", "training NLL"), ("lock_loss", "lock loss"), ("lr", "learning rate")):
        series = {}
        offset = 0
        for t in history["tasks_done"]:
            tr = history["traces"].get(t, [])
            series[t] = [(offset + r["step"], r[key]) for r in tr]
            offset += len(tr)
        if rows:
            (directory / f"{key}.svg").write_text(polyline_svg(series, title))


def write_artifacts(out: Path, report: dict, extras: dict, model: NIWFModel, store: CommitStore,
                    history: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "report.json")
    write_trace(history, out / "trace.csv")
    finals = extras["finals"]
    coords = np.concatenate([finals[t]["coords"] for t in finals]) if finals else np.zeros((0, model.coord_dim))
    labels = [t for t in finals for _ in range(len(finals[t]["coords"]))]
    export_coords(coords, labels, out / "coords.csv", store)
    write_entropy(extras, out / "entropy.csv")
    write_json(memory_report(MemorySpec.from_config(model.config)).to_dict(), out / "memory.json")
    write_plots(history, out / "plots")


# -- commands ---------------------------------------------------------------------

def _config(args) -> NIWFConfig:
    cfg = NIWFConfig.load(args.config) if args.config else NIWFConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if overrides:
        cfg = cfg.replace(**overrides)
    cfg.validate()
    return cfg


def _load(args):
    src = Path(args.ckpt) if args.ckpt else args.out / CHECKPOINT_DIR
    ck = persistence.load_checkpoint(src)
    cfg = ck.model.config
    for key in ("seed", "mode"):
        given = getattr(args, key, None)
        if given is not None and given != getattr(cfg, key):
            raise ConfigError(f"{key}: checkpoint was created with {getattr(cfg, key)!r}, got {given!r}")
    if getattr(args, "config", None):
        raise ConfigError("--config cannot be combined with an existing checkpoint")
    return ck


def _save(args, ck) -> Path:
    return persistence.save_checkpoint(ck.model, ck.store, args.out / CHECKPOINT_DIR, ck.history,
                                       ck.train_state)


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    model = NIWFModel(cfg)
    history = new_history()
    pretrain_stage(model, history)
    path = persistence.save_checkpoint(model, CommitStore(), args.out / CHECKPOINT_DIR, history)
    log.info("stage-0 checkpoint written to %s", path)
    return EXIT_OK


def cmd_train_task(args) -> int:
    ck = _load(args)
    state = ck.train_state if ck.train_state is not None and ck.train_state.task == args.task else None
    state = train_stage(ck.model, ck.store, args.task, ck.history, state, stop_at=args.stop_at)
    ck.train_state = None if state.finished else state
    log.info("task %s: %d/%d steps", args.task, state.step, state.total_steps)
    _save(args, ck)
    return EXIT_OK


def cmd_commit(args) -> int:
    ck = _load(args)
    region = commit_stage(ck.model, ck.store, args.task, ck.history)
    log.info("committed %s: tau=%.4f verify=%.3g", region.region_id, region.tau,
             ck.history["commits"][args.task]["verify_at_commit"])
    _save(args, ck)
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load(args)
    report, extras = eval_stage(ck.model, ck.store, ck.history)
    write_artifacts(args.out, report, extras, ck.model, ck.store, ck.history)
    log.info("report written to %s", args.out / "report.json")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    result = run_sequential(cfg)
    write_artifacts(args.out, result.report, result.extras, result.model, result.store, result.history)
    persistence.save_checkpoint(result.model, result.store, args.out / CHECKPOINT_DIR, result.history)
    log.info("report written to %s", args.out / "report.json")
    return EXIT_OK


def cmd_rollback(args) -> int:
    ck = _load(args)
    try:
        rollback(ck.store, args.region, ck.model)
    except KeyError as exc:
        raise NIWFError(str(exc)) from exc
    log.info("region %s removed; %d active", args.region, len(ck.store))
    _save(args, ck)
    return EXIT_OK


def cmd_memory(args) -> int:
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text())
            spec = MemorySpec.from_dict(doc)
        except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"memory spec: {exc}") from exc
    else:
        spec = MemorySpec.mistral()
    path = write_json(memory_report(spec).to_dict(), args.out / "memory.json")
    log.info("memory report written to %s", path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--out", type=Path, default=None,
                        help="output directory (default: $NIWF_OUT or ./niwf_out)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--mode", choices=MODES, default=None, help="override the config mode")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--ckpt", help="input checkpoint directory (default: OUT/checkpoint)")

    p = argparse.ArgumentParser(prog="niwf", description="Sequential-task training with committed weight-field regions.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="stage-0 backbone pretraining").set_defaults(fn=cmd_pretrain)
    sub.add_parser("run", parents=[common], help="full protocol: pretrain, train/commit each task, evaluate"
                   ).set_defaults(fn=cmd_run)
    t = sub.add_parser("train-task", parents=[common, ckpt], help="train one task from a checkpoint")
    t.add_argument("--task", required=True)
    t.add_argument("--stop-at", type=int, default=None, help="pause after this many steps of the task")
    t.set_defaults(fn=cmd_train_task)
    c = sub.add_parser("commit", parents=[common, ckpt], help="commit a trained task's region")
    c.add_argument("--task", required=True)
    c.set_defaults(fn=cmd_commit)
    sub.add_parser("eval", parents=[common, ckpt], help="evaluate a checkpoint and write artifacts"
                   ).set_defaults(fn=cmd_eval)
    r = sub.add_parser("rollback", parents=[common, ckpt], help="remove a committed region")
    r.add_argument("--region", required=True)
    r.set_defaults(fn=cmd_rollback)
    m = sub.add_parser("memory", parents=[common], help="analytical memory report")
    m.add_argument("--spec", help="JSON MemorySpec; default is the Mistral-7B preset")
    m.set_defaults(fn=cmd_memory)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None:
        args.out = Path(os.environ.get("NIWF_OUT", "niwf_out"))
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"niwf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"niwf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NIWFError, ValueError) as exc:
        print(f"niwf: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())

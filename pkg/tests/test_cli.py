import json
import subprocess
import sys

import pytest

from niwf.cli import main

from conftest import TINY


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_memory_preset(tmp_path):
    assert run("memory", "--out", tmp_path) == 0
    m = json.loads((tmp_path / "memory.json").read_text())
    assert m["adapter_params"] == 322_961_408 and m["snapshot_bytes"] == 524_288


def test_memory_bad_spec(tmp_path):
    bad = tmp_path / "spec.json"
    bad.write_text('{"n_layers": 1}')
    assert run("memory", "--spec", bad, "--out", tmp_path) == 3


def test_run_twice_is_byte_identical(tmp_path, cfg_file):
    for d in ("a", "b"):
        assert run("run", "--config", cfg_file, "--out", tmp_path / d, "--seed", 3) == 0
    for name in ("report.json", "trace.csv", "coords.csv", "entropy.csv", "memory.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["seed"] == 3 and report["mode"] == "niwf_soft"
    header = (tmp_path / "a" / "trace.csv").read_text().splitlines()[0]
    assert header == "task,step,nll,lock_loss,sep_loss,lr"
    assert (tmp_path / "a" / "plots" / "lock_loss.svg").is_file()


def test_staged_commands_match_run(tmp_path, cfg_file):
    assert run("run", "--config", cfg_file, "--out", tmp_path / "one") == 0
    out = tmp_path / "staged"
    assert run("pretrain", "--config", cfg_file, "--out", out) == 0
    assert run("train-task", "--task", "A", "--stop-at", 4, "--out", out) == 0
    assert run("train-task", "--task", "A", "--out", out) == 0
    assert run("commit", "--task", "A", "--out", out) == 0
    assert run("train-task", "--task", "B", "--out", out) == 0
    assert run("eval", "--out", out) == 0
    assert (out / "report.json").read_bytes() == (tmp_path / "one" / "report.json").read_bytes()


def test_rollback_then_eval(tmp_path, cfg_file):
    out = tmp_path / "r"
    assert run("run", "--config", cfg_file, "--out", out) == 0
    assert run("rollback", "--region", "A", "--out", out) == 0
    assert run("eval", "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["regions_active"] == 0 and report["regions"] == {}
    assert run("rollback", "--region", "A", "--out", out) == 5


def test_exit_codes(tmp_path, cfg_file):
    bad = tmp_path / "bad.json"
    bad.write_text('{"rnak": 4}')
    assert run("run", "--config", bad, "--out", tmp_path) == 3
    assert run("eval", "--out", tmp_path / "missing") == 4
    assert run("pretrain", "--config", cfg_file, "--out", tmp_path / "p") == 0
    assert run("eval", "--out", tmp_path / "p", "--seed", 9) == 3
    assert run("commit", "--task", "A", "--out", tmp_path / "p") == 5
    with pytest.raises(SystemExit) as e:
        run("run", "--mode", "bogus")
    assert e.value.code == 2


def test_env_out(tmp_path, monkeypatch):
    monkeypatch.setenv("NIWF_OUT", str(tmp_path / "env"))
    assert main(["memory"]) == 0
    assert (tmp_path / "env" / "memory.json").is_file()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "niwf.cli", "memory", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "memory.json").read_text())["wrapped_modules"] == 224

import json
import subprocess
import sys

import pytest

from gradiend import io as gio
from gradiend.cli import VERBS, main


@pytest.fixture
def config_file(tmp_path, tiny_run_config):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(tiny_run_config))
    return p


def test_show_config(capsys):
    assert main(["show-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["seed"] == 0
    assert "gradiend" in cfg


def test_verbs_cover_stages():
    assert set(VERBS) == {"gen-data", "train-lm", "train-gradiend", "eval-encoder", "sweep", "select", "report",
                          "run"}


def test_stage_verb_runs_prefix(config_file, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["train-lm", "--config", str(config_file), "--out", str(out)]) == 0
    assert "train-lm: completed gen-data, train-lm" in capsys.readouterr().out
    m = gio.read_json(out / "manifest.json")
    assert m["completed"] == ["gen-data", "train-lm"]


def test_run_and_seed_override(config_file, tmp_path):
    out = tmp_path / "o"
    assert main(["run", "--config", str(config_file), "--out", str(out), "--seed", "9"]) == 0
    m = gio.read_json(out / "manifest.json")
    assert m["seed"] == 9
    assert (out / "report" / "metrics.csv").exists()


def test_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert main(["run", "--config", str(bad)]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["gen-data", "--seed", "-3", "--out", str(tmp_path / "x")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "gradiend.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "show-config" in res.stdout

import json
import shutil
import subprocess
import sys

import pytest

from ufc.cli import main

from test_pipeline import TINY


def write_cfg(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["deploy"]) == 1
    assert main([]) == 1
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["generate", "--set", "vae.betta=1"]) == 1
    assert "betta" in capsys.readouterr().err


def test_stage_failure_exit_2(tmp_path, capsys):
    assert main(["cluster", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "missing features: run train-vae" in capsys.readouterr().err


def test_generate_and_report(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "o"
    assert main(["generate", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "generate" / "train" / "manifest.json").exists()
    assert main(["report", "--out", str(out)]) == 2
    (out / "results.csv").write_text("method,fraction,seed,mean_dice\n")
    assert main(["report", "--out", str(out)]) == 0
    assert "no runs found" in capsys.readouterr().out


def test_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("UFC_SEED", "5")
    cfg = write_cfg(tmp_path)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    monkeypatch.delenv("UFC_SEED")
    assert main(["generate", "--config", cfg, "--set", "seed=5", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "generate" / "train" / "sample_000000.bin").read_bytes()
    b = (tmp_path / "b" / "generate" / "train" / "sample_000000.bin").read_bytes()
    assert a == b


@pytest.mark.skipif(shutil.which("ufc") is None, reason="console script not installed")
def test_console_script_exit_code():
    proc = subprocess.run(["ufc", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ufc.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "matrix" in proc.stdout

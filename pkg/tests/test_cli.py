"""Command-line contract: outputs, manifests, exit codes and reproducibility."""

import json
import subprocess
import sys

import numpy as np
import pytest

from gridflow.cli import run
from gridflow.datagen import read_dataset_csv


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("GRIDFLOW_SEED", raising=False)
    return tmp_path


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("gridflow-error ")
    return json.loads(err[0][len("gridflow-error "):])


def _pipeline(wd):
    assert run(["gen-data", "--case", "case5", "--n", "40", "--seed", "7", "--out", "d.csv", "--quiet"]) == 0
    assert run(["gen-data", "--case", "case5", "--n", "20", "--seed", "8", "--out", "test.csv", "--quiet"]) == 0
    assert run(["train", "--data", "d.csv", "--case", "case5", "--out", "m.ckpt", "--steps", "30",
                "--hidden", "16", "--T", "25", "--seed", "1", "--loss-out", "loss.csv", "--quiet"]) == 0
    assert run(["sample", "--checkpoint", "m.ckpt", "--n", "20", "--lambda", "0", "--seed", "3",
                "--out", "u.csv", "--quiet"]) == 0
    assert run(["sample", "--checkpoint", "m.ckpt", "--n", "20", "--seed", "3", "--out", "g.csv",
                "--chunk-size", "8", "--quiet"]) == 0
    (wd / "rep").mkdir()
    assert run(["eval", "--real", "test.csv", "--syn", "g.csv", "--case", "case5", "--out-dir", "rep",
                "--bins", "10", "--quiet"]) == 0
    assert run(["downstream", "--train", "gt=d.csv", "--train", "guided=g.csv", "--test", "test.csv",
                "--case", "case5", "--out-dir", "rep", "--steps", "20", "--quiet"]) == 0


def test_pipeline_outputs(workdir):
    _pipeline(workdir)
    d = read_dataset_csv(workdir / "d.csv")
    assert d.data.shape == (40, 20)
    assert (workdir / "d.csv").read_text().startswith("p_1,p_2,p_3,p_4,p_5,q_1")
    assert len((workdir / "loss.csv").read_text().splitlines()) == 31
    g = json.loads((workdir / "g.csv.manifest.json").read_text())
    assert g["config"]["lambda"] == 1e-2  # bundled 5-bus default
    assert g["events"]["T"] == 25 and g["events"]["abort"] is None
    assert len(g["events"]["checkpoint_sha256"]) == 64
    names = {p.name for p in (workdir / "rep").iterdir()}
    assert {"w1.txt", "mismatch_case5.csv", "downstream.csv", "hist_1_dp.csv", "hist_5_dq.csv"} <= names
    assert float((workdir / "rep" / "w1.txt").read_text().split()[0]) > 0


def test_every_manifest_reproduces_bytes(workdir):
    _pipeline(workdir)
    manifests = sorted(workdir.glob("*.manifest.json")) + sorted((workdir / "rep").glob("*.manifest.json"))
    assert len(manifests) == 7
    before = {}
    for m in manifests:
        for path in json.loads(m.read_text())["outputs"]:
            before[path] = (workdir / path).read_bytes()
    for m in manifests:
        snapshot = m.read_bytes()
        command = json.loads(snapshot)["command"]
        assert run([command, "--config", str(m), "--quiet"]) == 0
        assert m.read_bytes() == snapshot
    for path, blob in before.items():
        assert (workdir / path).read_bytes() == blob, path


def test_sample_rerun_identical(workdir):
    _pipeline(workdir)
    first = (workdir / "u.csv").read_bytes()
    assert run(["sample", "--checkpoint", "m.ckpt", "--n", "20", "--lambda", "0", "--seed", "3",
                "--out", "u.csv", "--quiet", "--threads", "2", "--chunk-size", "256"]) == 0
    assert (workdir / "u.csv").read_bytes() == first


def test_flags_override_config(workdir):
    (workdir / "cfg.json").write_text(json.dumps({"case": "case5", "n": 12, "out": "a.csv", "seed": 1}))
    assert run(["gen-data", "--config", "cfg.json", "--n", "5", "--quiet"]) == 0
    assert read_dataset_csv(workdir / "a.csv").data.shape == (5, 20)


def test_env_seed_fallback(workdir, monkeypatch):
    monkeypatch.setenv("GRIDFLOW_SEED", "7")
    assert run(["gen-data", "--case", "case5", "--n", "6", "--out", "e.csv", "--quiet"]) == 0
    monkeypatch.delenv("GRIDFLOW_SEED")
    assert run(["gen-data", "--case", "case5", "--n", "6", "--seed", "7", "--out", "f.csv", "--quiet"]) == 0
    assert (workdir / "e.csv").read_bytes() == (workdir / "f.csv").read_bytes()


def test_unknown_flag_exit_2(workdir, capsys):
    assert run(["gen-data", "--case", "case5", "--out", "x.csv", "--frobnicate"]) == 2
    assert _error(capsys)["code"] == 2
    assert run(["gen-data", "--case", "case5"]) == 2
    assert "--out" in _error(capsys)["message"]


def test_file_errors_exit_3(workdir, capsys):
    assert run(["gen-data", "--case", "nowhere", "--out", "x.csv"]) == 3
    assert _error(capsys)["kind"] == "file"
    assert run(["train", "--data", "missing.csv", "--out", "m.ckpt"]) == 3
    _error(capsys)
    assert run(["gen-data", "--case", "case5", "--n", "3", "--out", "nodir/x.csv"]) == 3
    _error(capsys)
    assert not list(workdir.iterdir())


def test_eval_width_mismatch_leaves_no_reports(workdir, capsys):
    assert run(["gen-data", "--case", "case5", "--n", "4", "--out", "five.csv", "--quiet"]) == 0
    (workdir / "two.csv").write_text("p_1,p_2,q_1,q_2,v_1,v_2,theta_1,theta_2\n0,0,0,0,1,1,0,0\n")
    (workdir / "rep").mkdir()
    assert run(["eval", "--real", "five.csv", "--syn", "two.csv", "--case", "case5", "--out-dir", "rep"]) == 3
    assert _error(capsys)["code"] == 3
    assert list((workdir / "rep").iterdir()) == []


def test_numerical_abort_exit_4(workdir, capsys):
    assert run(["gen-data", "--case", "case5", "--n", "20", "--out", "d.csv", "--quiet"]) == 0
    assert run(["train", "--data", "d.csv", "--case", "case5", "--out", "m.ckpt", "--steps", "5",
                "--hidden", "8", "--T", "20", "--quiet"]) == 0
    code = run(["sample", "--checkpoint", "m.ckpt", "--n", "4", "--lambda", "1e12", "--no-clip",
                "--out", "s.csv", "--quiet"])
    assert code == 4
    err = _error(capsys)
    assert err["kind"] == "numerical" and 1 <= err["step"] <= 20
    assert not (workdir / "s.csv").exists()
    manifest = json.loads((workdir / "s.csv.manifest.json").read_text())
    assert manifest["events"]["abort"]["step"] == err["step"]


def test_manifest_for_other_command_rejected(workdir, capsys):
    assert run(["gen-data", "--case", "case5", "--n", "3", "--out", "d.csv", "--quiet"]) == 0
    assert run(["train", "--config", "d.csv.manifest.json"]) == 3
    _error(capsys)


def test_console_entry_point(workdir):
    out = subprocess.run([sys.executable, "-m", "gridflow.cli", "gen-data", "--bogus"],
                         capture_output=True, text=True)
    assert out.returncode == 2
    assert out.stderr.startswith("gridflow-error ")

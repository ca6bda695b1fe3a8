import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mrmae.cli import run


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["--seed", "3", "--out", str(root / "data"), "synth", "--preset", "planted", "--k", "120"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 40, "learning_rate": 3e-3, "batch_size": 32, "policy": {"kind": "fixed_fraction", "p": 0.34}}))
    data = str(root / "data" / "manifest.json")
    assert run(["--seed", "1", "--out", str(root / "mae"), "train", "--data", data, "--config", str(cfg), "--test-months", "24"]) == 0
    return root, data


def test_train_writes_checkpoint_and_log(work):
    root, _ = work
    assert (root / "mae" / "model.ckpt").exists()
    log = _csv(root / "mae" / "train_log.csv")
    assert len(log) == 40
    doc = json.loads((root / "mae" / "run.json").read_text())
    assert doc["command"] == "train" and doc["args"]["config_doc"]["epochs"] == 40


def test_predict_on_train_beats_mean(work):
    root, data = work
    out = root / "pred"
    assert run(["--out", str(out), "predict", "--data", data, "--model", str(root / "mae" / "model.ckpt"),
                "--mask-layers", "C", "--split", "train"]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["rows"] == 96 and m["scored_values"] == 96 * 16
    assert m["accuracy"] > m["mean_baseline_accuracy"]
    rows = _csv(out / "predictions.csv")
    assert len(rows) == 96 * 16 and {r["layer"] for r in rows} == {"C"}


def test_single_member_ensemble_matches_predict(work):
    root, data = work
    common = ["--data", data, "--model", str(root / "mae" / "model.ckpt"), "--mask-layers", "C"]
    assert run(["--out", str(root / "p1"), "predict", *common]) == 0
    # superset of the same size as the base mask is the base mask itself
    assert run(["--out", str(root / "e1"), "ensemble", *common, "--iters", "1", "--ensemble-mask-frac", str(16 / 48)]) == 0
    a = _csv(root / "p1" / "predictions.csv")
    b = _csv(root / "e1" / "predictions.csv")
    assert [r["layer"] + r["patch_row"] + r["patch_col"] + r["timestamp"] for r in a] == [
        r["layer"] + r["patch_row"] + r["patch_col"] + r["timestamp"] for r in b
    ]
    pa = np.array([float(r["prediction"]) for r in a])
    pb = np.array([float(r["prediction"]) for r in b])
    np.testing.assert_allclose(pa, pb, rtol=0, atol=1e-12)


def test_sweep_has_one_row_per_fraction_and_model(work):
    root, data = work
    out = root / "sweep"
    ckpt = str(root / "mae" / "model.ckpt")
    assert run(["--out", str(out), "evaluate", "--data", data, "--model", f"mae={ckpt}",
                "--ensemble-model", f"ens={ckpt}", "--ensemble-iters", "4", "--inputs", "A,B", "--outputs", "C",
                "--sweep", "--fractions", "0,0.3,0.6", "--trials", "3"]) == 0
    rows = _csv(out / "sweep.csv")
    assert len(rows) == 3 * 2
    assert {r["model"] for r in rows} == {"mae", "ens"}


@pytest.mark.parametrize("command", ["ensemble", "importance", "shift"])
def test_rerun_is_byte_identical(work, command):
    root, data = work
    ckpt = str(root / "mae" / "model.ckpt")
    argv = {
        "ensemble": ["ensemble", "--data", data, "--model", ckpt, "--mask-layers", "C", "--iters", "4"],
        "importance": ["importance", "--data", data, "--model", ckpt, "--iterations", "3"],
        "shift": ["shift", "--data", data, "--patch", "A,1,1"],
    }[command]
    first = root / f"r_{command}_1"
    second = root / f"r_{command}_2"
    assert run(["--seed", "9", "--out", str(first), *argv]) == 0
    assert run(["--out", str(second), "rerun", str(first / "run.json")]) == 0
    names = sorted(p.name for p in first.iterdir())
    assert names == sorted(p.name for p in second.iterdir())
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_linear_baseline_and_pseudo_labels(work):
    root, data = work
    assert run(["--out", str(root / "lin"), "train", "--kind", "linear", "--data", data, "--test-months", "24",
                "--inputs", "A,B", "--outputs", "C"]) == 0
    assert run(["--out", str(root / "linp"), "predict", "--data", data,
                "--model", str(root / "lin" / "model.ckpt")]) == 0
    m = json.loads((root / "linp" / "metrics.json").read_text())
    assert m["accuracy"] > m["mean_baseline_accuracy"]
    assert run(["--out", str(root / "pl"), "pseudo-label", "--data", data,
                "--teacher", str(root / "mae" / "model.ckpt"), "--unlabeled", data, "--unknown-layers", "C",
                "--iters", "2", "--student", "linear"]) == 0
    prov = _csv(root / "pl" / "provenance.csv")
    assert len(prov) > 0 and (root / "pl" / "student.ckpt").exists()


def test_select_patches(work):
    root, data = work
    assert run(["--out", str(root / "sel"), "select-patches", "--data", data, "--layers", "A,B"]) == 0
    rows = _csv(root / "sel" / "selected.csv")
    assert rows and {r["layer"] for r in rows} <= {"A", "B"}


@pytest.mark.parametrize("argv", [
    ["predict", "--data", "/nonexistent/manifest.json", "--model", "/nonexistent/model.ckpt", "--mask-layers", "C"],
    ["train", "--kind", "linear", "--data", "DATA"],
    ["ensemble", "--data", "DATA", "--model", "CKPT", "--mask-layers", "Q"],
])
def test_bad_input_exits_nonzero(work, argv, capsys):
    root, data = work
    argv = [a.replace("DATA", data).replace("CKPT", str(root / "mae" / "model.ckpt")) for a in argv]
    assert run(["--out", str(root / "bad"), *argv]) == 1
    assert "mrmae" in capsys.readouterr().err


def test_console_script(work):
    root, _ = work
    res = subprocess.run([sys.executable, "-m", "mrmae.cli", "--out", str(root / "x"), "train", "--data", "/no/such.json"],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "Error" in res.stderr

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fcfd.cli import cli_dispatch
from fcfd.data import load_idx_dataset

TINY = """[model]
teacher_epochs = 1
[data]
num_classes = 3
per_class = 16
eval_per_class = 8
image_size = 16
batch_size = 16
[optim]
epochs = 2
lr_milestones = 1
"""


def run(capsys, *argv):
    code = cli_dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("FCFD_OUT", raising=False)
    (tmp_path / "tiny.ini").write_text(TINY)
    return tmp_path


def tree(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*"))


def test_demo_toy(capsys):
    code, out, _ = run(capsys, "demo-toy")
    assert code == 0
    assert "output = 336" in out
    rows = {line.split()[0] + line.split()[1]: line.split() for line in out.splitlines() if line.startswith("(")}
    assert rows["(3,4)"][2:4] == ["161", "175"] and rows["(4,3)"][2:4] == ["301", "35"]
    assert rows["(3,4)"][4] == rows["(4,3)"][4] == "0.5000"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fcfd", "demo-toy"], capture_output=True, text=True)
    assert proc.returncode == 0 and "336" in proc.stdout


def test_missing_config(capsys, workdir):
    code, _, err = run(capsys, "train", "--config", "missing.cfg")
    assert code == 3
    assert err.startswith("error config:not-found:") and len(err.strip().splitlines()) == 1
    assert tree(workdir) == ["tiny.ini"]


def test_invalid_config(capsys, workdir):
    (workdir / "bad.ini").write_text("[sampler]\npaths_per_iter = 9\n")
    code, _, err = run(capsys, "train", "--config", "bad.ini")
    assert code == 3 and err.startswith("error config:invalid:") and "sampler.paths_per_iter" in err


def test_usage_errors(capsys):
    code, _, err = run(capsys, "train", "--bogus")
    assert code == 2 and err.startswith("error usage:")
    assert run(capsys, "explode")[0] == 2
    assert run(capsys)[0] == 2


def test_models_list(capsys):
    code, out, _ = run(capsys, "models", "list")
    assert code == 0
    assert [line.split()[0] for line in out.splitlines()] == ["tiny-hetero-pair", "tiny-resnet-pair",
                                                              "toy-scalar-pair"]


@pytest.fixture
def trained(capsys, workdir):
    code, out, _ = run(capsys, "train", "--config", "tiny.ini", "--seed", 0, "--out-dir", "run")
    assert code == 0
    return workdir, last_json(out)


def test_train_outputs(trained):
    root, summary = trained
    assert tree(root) == ["run", "run/config.ini", "run/manifest.json", "run/metrics.jsonl", "run/student.ckpt",
                          "run/teacher-metrics.jsonl", "run/teacher.ckpt", "tiny.ini"]
    manifest = json.loads((root / "run/manifest.json").read_text())
    assert manifest["config_hash"] == summary["config_hash"]
    assert manifest["config"]["seed"] == 0 and manifest["config"]["epochs"] == 2
    assert manifest["finished"] >= manifest["created"]
    records = [json.loads(line) for line in (root / "run/metrics.jsonl").read_text().splitlines()]
    assert records[-1] == {"event": "eval", "epoch": 1, "iteration": 6, "accuracy": summary["accuracy"]}


def test_train_twice_is_byte_identical(capsys, trained):
    root, _ = trained
    assert run(capsys, "train", "--config", "tiny.ini", "--seed", 0, "--out-dir", "again")[0] == 0
    for name in ("metrics.jsonl", "teacher-metrics.jsonl", "student.ckpt", "teacher.ckpt"):
        assert (root / "run" / name).read_bytes() == (root / "again" / name).read_bytes()


def test_resume_reuses_teacher(capsys, trained):
    root, summary = trained
    before = (root / "run/teacher.ckpt").stat().st_mtime_ns
    code, out, _ = run(capsys, "train", "--config", "tiny.ini", "--seed", 0, "--out-dir", "run", "--resume")
    assert code == 0 and last_json(out)["accuracy"] == summary["accuracy"]
    assert (root / "run/teacher.ckpt").stat().st_mtime_ns == before


def test_run_dir_conflict(capsys, trained):
    code, _, err = run(capsys, "train", "--config", "tiny.ini", "--seed", 1, "--out-dir", "run")
    assert code == 3 and err.startswith("error config:run-dir-conflict:")


def test_eval_reproduces_recorded_accuracy(capsys, trained):
    root, summary = trained
    code, out, _ = run(capsys, "eval", "--checkpoint", "run/student.ckpt", "--out-dir", "ev")
    assert code == 0
    assert last_json(out)["accuracy"] == summary["accuracy"]
    assert json.loads((root / "ev/eval.json").read_text())["accuracy"] == summary["accuracy"]


def test_eval_bad_checkpoint(capsys, workdir):
    (workdir / "junk.ckpt").write_bytes(b"junk")
    assert run(capsys, "eval", "--checkpoint", "nope.ckpt")[2].startswith("error checkpoint:not-found:")
    code, _, err = run(capsys, "eval", "--checkpoint", "junk.ckpt")
    assert code == 3 and err.startswith("error checkpoint:invalid:")


def test_probe_sensitivity(capsys, trained):
    root, _ = trained
    code, out, _ = run(capsys, "probe-sensitivity", "--checkpoint", "run/teacher.ckpt", "--k", 2,
                       "--directions", 8, "--samples", 12, "--seed", 3, "--out-dir", "sens")
    assert code == 0
    report = json.loads((root / "sens/sensitivity.json").read_text())
    assert len(report["divergences"]) == 8 and report["min"] <= report["mean"] <= report["max"]
    with open(root / "sens/sensitivity.csv") as f:
        rows = list(csv.DictReader(f))
    assert [float(r["divergence"]) for r in rows] == report["divergences"]
    assert run(capsys, "probe-sensitivity", "--checkpoint", "run/teacher.ckpt", "--k", 9,
               "--out-dir", "sens")[0] == 3


def test_probe_exit(capsys, trained):
    root, _ = trained
    code, out, _ = run(capsys, "probe-exit", "--teacher", "run/teacher.ckpt", "--student", "run/student.ckpt",
                       "--k", 3, "--branch-epochs", 1, "--out-dir", "exit")
    assert code == 0
    record = json.loads((root / "exit/exit-probe.json").read_text())
    assert record["branch_params"] > record["teacher_tail_params"]
    assert 0.0 <= record["students"]["run/student.ckpt"] <= 1.0
    assert run(capsys, "probe-exit", "--teacher", "run/teacher.ckpt", "--student", "run/student.ckpt",
               "--k", 1, "--branch-epochs", 1, "--out-dir", "exit")[0] == 3


def test_data_synth_then_train_from_directory(capsys, workdir):
    code, out, _ = run(capsys, "data-synth", "--config", "tiny.ini", "--seed", 2, "--out-dir", "synth")
    assert code == 0 and last_json(out)["train"] == 48
    code, out, _ = run(capsys, "train", "--config", "tiny.ini", "--set", "data.dir=synth", "--out-dir", "fromdir")
    assert code == 0
    assert run(capsys, "train", "--config", "tiny.ini", "--set", "data.dir=nowhere", "--out-dir", "x")[0] == 3


def test_data_convert(capsys, workdir):
    rng = np.random.default_rng(0)
    rec = np.concatenate([np.array([[1, 55], [2, 99]], np.uint8), rng.integers(0, 256, (2, 3072), dtype=np.uint8)], 1)
    (workdir / "b.bin").write_bytes(rec.tobytes())
    code, out, _ = run(capsys, "data-convert", "--input", "b.bin", "--format", "cifar100", "--num-classes", 100,
                       "--out-dir", "conv")
    assert code == 0
    ds = load_idx_dataset(workdir / "conv/train-images.idx", workdir / "conv/train-labels.idx", 100)
    assert ds.labels.tolist() == [55, 99]
    code, _, err = run(capsys, "data-convert", "--input", "b.bin", "--out-dir", "conv")
    assert code == 3 and err.startswith("error data:invalid:")


def test_env_out_dir(capsys, workdir, monkeypatch):
    monkeypatch.setenv("FCFD_OUT", str(workdir / "from-env"))
    assert run(capsys, "data-synth", "--config", "tiny.ini")[0] == 0
    assert (workdir / "from-env/train-images.idx").exists()


def test_numeric_failure_exit_code(capsys, workdir):
    code, _, err = run(capsys, "train", "--config", "tiny.ini", "--set", "optim.base_lr=1e12",
                       "--set", "optim.epochs=3", "--set", "optim.lr_milestones=", "--out-dir", "boom")
    assert code == 4 and err.startswith("error numeric:")

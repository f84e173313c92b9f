import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from cait_lab.checkpoint import load_checkpoint
from cait_lab.cli import content_hash, main

DATA = "synthetic:seed=1,n=24,classes=2"
FAST = ["--data", DATA, "--batch-size", "8", "--max-steps", "2", "--epochs", "1"]


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_train_twice_is_identical(tmp_path):
    for d in ("a", "b"):
        assert run("train", "--preset", "toy-12", "--seed", 7, "--out", tmp_path / d, *FAST) == 0
    for name in ("checkpoint.ckpt", "report.csv", "branch_ratios.csv", "manifest.json"):
        a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
        if name == "manifest.json":
            a, b = (json.loads(x) for x in (a, b))
            a.pop("out"), b.pop("out")
        assert a == b, name
    model, meta, rng_state = load_checkpoint(tmp_path / "a" / "checkpoint.ckpt")
    assert meta["steps"] == "2" and rng_state is not None


def test_rezero_epsilon_sets_alpha(tmp_path):
    out = tmp_path / "rz"
    assert run("train", "--strategy", "rezero-adapted", "--epsilon", 0.1, "--lr", 1e-12, "--out", out,
               *FAST) == 0
    model, _, _ = load_checkpoint(out / "checkpoint.ckpt")
    alphas = [t.data for n, t in model.params.items() if n.endswith("scale1")]
    assert alphas and all(a.shape == (1,) and a[0] == pytest.approx(0.1, abs=1e-9) for a in alphas)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["resolved"]["train"]["strategy"] == "rezero-adapted:0.1"


def test_s36_like_resolves_drop_rate(tmp_path):
    out = tmp_path / "s36"
    assert run("train", "--preset", "s36-like", "--out", out, "--data", "synthetic:seed=1,n=4",
               "--batch-size", 4, "--max-steps", 1, "--epochs", 1) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["resolved"]["model"]["drop_rate"] == "0.2"
    assert manifest["resolved"]["model"]["epsilon"] == "1e-06"
    assert len(manifest["inputs_hash"]) == 40


def test_divergence_exits_one(tmp_path):
    code = run("train", "--strategy", "baseline", "--lr", 1e3, "--warmup-epochs", 0, "--out", tmp_path,
               "--data", DATA, "--batch-size", 4, "--epochs", 3)
    assert code == 1
    assert read_csv(tmp_path / "report.csv")[-1]["diverged"] == "1"


def test_sweep_matrix(tmp_path):
    assert run("sweep", "--strategies", "baseline,layerscale", "--depths", "12,24", "--out", tmp_path,
               *FAST) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 4
    assert {(r["strategy"], r["depth"]) for r in rows} == {(s, d) for s in ("baseline", "layerscale")
                                                           for d in ("12", "24")}
    drop = {r["depth"]: r["drop_rate"] for r in rows}
    assert float(drop["12"]) == 0.0 and float(drop["24"]) == pytest.approx(0.1)
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_records_cell_errors(tmp_path):
    # 5 classes do not fit the 2-class toy head, so every cell fails
    assert run("sweep", "--depths", "2", "--out", tmp_path, "--data", "synthetic:seed=1,n=8,classes=5",
               "--max-steps", 1) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 2 and all(r["status"].startswith("error") for r in rows)


def test_verify_passes_and_injection_fails(tmp_path, capsys):
    assert run("verify", "--out", tmp_path / "ok") == 0
    text = (tmp_path / "ok" / "verify.txt").read_text()
    for suite in ("gradients", "attention", "checkpoint"):
        assert f"{suite}: PASS" in text
    for suite in ("gradients", "attention", "checkpoint"):
        assert run("verify", "--inject-failure", suite, "--out", tmp_path / suite) == 1
        assert f"{suite}: FAIL" in (tmp_path / suite / "verify.txt").read_text()


def test_analyze_writes_maps(tmp_path):
    ck = tmp_path / "t"
    assert run("train", "--out", ck, *FAST) == 0
    out = tmp_path / "an"
    assert run("analyze", "--checkpoint", ck / "checkpoint.ckpt", "--tables", "--data", DATA, "--out", out) == 0
    assert len(list((out / "attention").glob("*.pgm"))) == 8
    assert len(list(out.glob("saliency_*.ppm"))) == 2
    assert len(read_csv(out / "branch_ratios.csv")) == 12 * 2
    tables = read_csv(out / "tables.csv")
    assert {"model", "params_M", "gflops_224", "gflops_384"} <= set(tables[0])
    assert json.loads((out / "manifest.json").read_text())["command"] == "analyze"


def test_analyze_tables_only(tmp_path):
    assert run("analyze", "--tables", "--out", tmp_path) == 0
    assert len(read_csv(tmp_path / "tables.csv")) == 10


def test_missing_checkpoint_exits_two(tmp_path):
    assert run("analyze", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path) == 2
    assert run("retrain", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path) == 2


@pytest.mark.parametrize("argv", [["train", "--bogus"], ["frobnicate"], ["train", "--preset", "L-99"],
                                  ["train", "--strategy", "rezero-original"], ["verify", "--suites", "nope"]])
def test_usage_errors_exit_two(tmp_path, argv):
    assert run(*argv, *(["--out", tmp_path] if argv[0] in ("train", "verify") else [])) == 2


def test_retrain_from_checkpoint(tmp_path):
    assert run("train", "--out", tmp_path / "src", *FAST) == 0
    assert run("retrain", "--checkpoint", tmp_path / "src" / "checkpoint.ckpt", "--out", tmp_path / "re",
               *FAST) == 0
    src, _, _ = load_checkpoint(tmp_path / "src" / "checkpoint.ckpt")
    re, meta, _ = load_checkpoint(tmp_path / "re" / "checkpoint.ckpt")
    assert meta["command"] == "retrain" and re.frozen
    for n in re.frozen:
        assert np.array_equal(re.params[n].data, src.params[n].data)


def test_content_hash_is_git_blob_id():
    assert content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "cait_lab.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train" in out.stdout

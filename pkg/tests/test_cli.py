import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from buda.cli import EXIT_GRADCHECK, EXIT_INVALID_DATA, EXIT_OK, EXIT_USAGE, main
from buda.metrics import METRIC_FIELDS
from buda.scenario import generate_scenario, load_dataset, save_dataset

SPEC = dict(H=8, W=8, n_source=16, n_target_train=16, n_target_test=8)
CONFIG = dict(pretrain_epochs=2, adapt_epochs=1, gen_iters=20, head_epochs=2, selftrain_epochs=1,
              n_gen_per_class=20)


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "config.json").write_text(json.dumps(CONFIG))
    assert main(["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data"), "--seed", "1"]) == 0
    return root


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run(files, out, *extra):
    return main(["run", "--data", str(files / "data"), "--config", str(files / "config.json"),
                 "--out", str(out), *extra])


# ---------------------------------------------------------------- gen-data

def test_gen_data_schema(files):
    names = sorted(p.name for p in (files / "data").iterdir())
    assert names == ["manifest.json", "source.bin", "target_test.bin", "target_train.bin", "target_train.oracle"]
    m = json.loads((files / "data" / "manifest.json").read_text())
    assert m["spec"]["seed"] == 1 and m["n_classes"] == 8 and len(m["class_names"]) == 8


def test_gen_data_default_spec(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d")]) == 0
    assert load_dataset(tmp_path / "d").spec.n_source == 200


def test_gen_data_is_byte_deterministic(files, tmp_path):
    assert main(["gen-data", "--spec", str(files / "spec.json"), "--out", str(tmp_path / "d"), "--seed", "1"]) == 0
    for name in ("source.bin", "target_train.bin", "target_test.bin", "target_train.oracle", "manifest.json"):
        assert (tmp_path / "d" / name).read_bytes() == (files / "data" / name).read_bytes()


@pytest.mark.parametrize("bad", [{"n_private": 0}, {"n_shared": 1}, {"not_a_key": 3}])
def test_gen_data_rejects_invalid_specs(tmp_path, bad, capsys):
    (tmp_path / "s.json").write_text(json.dumps({**SPEC, **bad}))
    assert main(["gen-data", "--spec", str(tmp_path / "s.json"), "--out", str(tmp_path / "d")]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


# ---------------------------------------------------------------- run

@pytest.mark.parametrize("mode,active", [
    ("zs3", {"min_ent": False, "adversarial": False, "shared_adaptation": False, "self_training": False}),
    ("budanet", {"min_ent": True, "shared_adaptation": True, "domain_aware_zsl": True, "self_training": True,
                 "adversarial": True}),
])
def test_run_outputs_and_active_losses(files, tmp_path, mode, active):
    assert run(files, tmp_path / "r", "--mode", mode) == EXIT_OK
    out = tmp_path / "r"
    report = json.loads((out / "report.json").read_text())
    assert set(METRIC_FIELDS) <= set(report) and report["mode"] == mode
    row, = read_csv(out / "report.csv")
    assert float(row["hIoU"]) == report["hIoU"]
    runlog = json.loads((out / "run_log.json").read_text())
    assert {k: runlog["active_losses"][k] for k in active} == active
    assert (out / "curves.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["mode"] == mode and manifest["seed"] == 0
    ckpts = {p.name for p in (out / "checkpoints").iterdir()}
    assert {"F_pre.ckpt", "F_step1.ckpt", "G.ckpt", "F_cls.ckpt", "F_final.ckpt"} <= ckpts


def test_run_is_byte_deterministic(files, tmp_path):
    assert run(files, tmp_path / "a", "--seed", "3") == 0
    assert run(files, tmp_path / "b", "--seed", "3") == 0
    assert (tmp_path / "a/report.json").read_bytes() == (tmp_path / "b/report.json").read_bytes()
    for p in (tmp_path / "a/checkpoints").iterdir():
        assert p.read_bytes() == (tmp_path / "b/checkpoints" / p.name).read_bytes()


def test_run_manifest_reproduces_the_run(files, tmp_path):
    assert run(files, tmp_path / "a", "--seed", "2", "--mode", "zs3-uda") == 0
    m = json.loads((tmp_path / "a/run_manifest.json").read_text())
    (tmp_path / "cfg.json").write_text(json.dumps(m["config"]))
    assert main(["run", "--data", m["dataset"], "--config", str(tmp_path / "cfg.json"), "--seed", str(m["seed"]),
                 "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/report.json").read_bytes() == (tmp_path / "b/report.json").read_bytes()


def test_unknown_mode_exits_2(files, tmp_path):
    assert run(files, tmp_path / "r", "--mode", "zs5") == EXIT_USAGE


def test_dataset_violation_exits_3(files, tmp_path):
    ds = load_dataset(files / "data")
    ds.source.labels[0, 0, 0] = ds.spec.n_shared      # a private pixel in the source split
    save_dataset(ds, tmp_path / "bad")
    rc = main(["run", "--data", str(tmp_path / "bad"), "--config", str(files / "config.json"),
               "--out", str(tmp_path / "r")])
    assert rc == EXIT_INVALID_DATA
    assert not (tmp_path / "r").exists()


def test_misaligned_oracle_blocks_gt_mode(files, tmp_path):
    ds = load_dataset(files / "data")
    ds._oracle = ds.oracle_labels()[::-1].copy()
    save_dataset(ds, tmp_path / "bad")
    (tmp_path / "gt.json").write_text(json.dumps({**CONFIG, "use_oracle_labels": True}))
    rc = main(["run", "--data", str(tmp_path / "bad"), "--config", str(tmp_path / "gt.json"),
               "--out", str(tmp_path / "r")])
    assert rc == EXIT_INVALID_DATA


# ---------------------------------------------------------------- eval

def test_eval_matches_run(files, tmp_path):
    assert run(files, tmp_path / "r", "--seed", "1") == 0
    assert main(["eval", "--data", str(files / "data"), "--model", str(tmp_path / "r/checkpoints/F_final.ckpt"),
                 "--out", str(tmp_path / "e.json")]) == 0
    ran = json.loads((tmp_path / "r/report.json").read_text())
    ev = json.loads((tmp_path / "e.json").read_text())
    assert {k: ev[k] for k in METRIC_FIELDS} == {k: ran[k] for k in METRIC_FIELDS}


@pytest.mark.parametrize("ckpt", ["F_pre.ckpt", "G.ckpt"])
def test_eval_rejects_mismatched_models(files, tmp_path, ckpt):
    assert run(files, tmp_path / "r") == 0
    rc = main(["eval", "--data", str(files / "data"), "--model", str(tmp_path / "r/checkpoints" / ckpt)])
    assert rc == EXIT_USAGE


def test_eval_rejects_garbage_checkpoint(files, tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"XXXXXXXX")
    assert main(["eval", "--data", str(files / "data"), "--model", str(tmp_path / "x.ckpt")]) == EXIT_USAGE


# ---------------------------------------------------------------- sweep

def test_p_sweep_rows(files, tmp_path):
    rc = main(["sweep", "--param", "p", "--values", "10,30,50,70,100", "--seeds", "0", "--data",
               str(files / "data"), "--config", str(files / "config.json"), "--out", str(tmp_path / "s")])
    assert rc == 0
    rows = read_csv(tmp_path / "s/sweep.csv")
    assert [r["value"] for r in rows] == ["10", "30", "50", "70", "100"]
    assert (tmp_path / "s/sweep.png").exists() and (tmp_path / "s/sweep_manifest.json").exists()


def test_p_sweep_with_oracle_row(files, tmp_path):
    rc = main(["sweep", "--param", "p", "--values", "10,50", "--seeds", "0,1", "--oracle", "--data",
               str(files / "data"), "--config", str(files / "config.json"), "--out", str(tmp_path / "s")])
    assert rc == 0
    rows = read_csv(tmp_path / "s/sweep.csv")
    assert [r["value"] for r in rows] == ["10", "50", "GT"]
    assert all(r["n_seeds"] == "2" for r in rows)
    per_seed = read_csv(tmp_path / "s/sweep_per_seed.csv")
    assert len(per_seed) == 6
    mean = np.mean([float(r["hIoU"]) for r in per_seed if r["value"] == "50"])
    assert float(rows[1]["hIoU"]) == pytest.approx(mean, rel=1e-12)


def test_private_count_sweep_columns(files, tmp_path):
    rc = main(["sweep", "--param", "private-count", "--values", "1,3", "--seeds", "0", "--spec",
               str(files / "spec.json"), "--config", str(files / "config.json"), "--out", str(tmp_path / "s")])
    assert rc == 0
    rows = read_csv(tmp_path / "s/sweep.csv")
    assert len(rows) == 2
    assert {"shared_mIoU", "private_mIoU", "hIoU"} <= set(rows[0])


def test_single_value_sweep_equals_run(files, tmp_path):
    assert main(["sweep", "--param", "p", "--values", "50", "--seeds", "4", "--data", str(files / "data"),
                 "--config", str(files / "config.json"), "--out", str(tmp_path / "s")]) == 0
    assert run(files, tmp_path / "r", "--seed", "4") == 0
    row, = read_csv(tmp_path / "s/sweep_per_seed.csv")
    report = json.loads((tmp_path / "r/report.json").read_text())
    for k in METRIC_FIELDS:
        assert float(row[k]) == report[k]


@pytest.mark.parametrize("argv", [
    ["--param", "p", "--values", "0,50"],
    ["--param", "p", "--values", "ten"],
    ["--param", "private-count", "--values", "0"],
    ["--param", "p", "--values", "50", "--mode", "zs9"],
])
def test_sweep_argument_errors(files, tmp_path, argv):
    rc = main(["sweep", *argv, "--seeds", "0", "--data", str(files / "data"), "--out", str(tmp_path / "s")])
    assert rc == EXIT_USAGE


def test_sweep_in_worker_processes(files, tmp_path, monkeypatch):
    monkeypatch.setenv("BUDA_THREADS", "2")
    assert main(["sweep", "--param", "p", "--values", "50", "--seeds", "4", "--data", str(files / "data"),
                 "--config", str(files / "config.json"), "--out", str(tmp_path / "par")]) == 0
    monkeypatch.setenv("BUDA_THREADS", "1")
    assert main(["sweep", "--param", "p", "--values", "50", "--seeds", "4", "--data", str(files / "data"),
                 "--config", str(files / "config.json"), "--out", str(tmp_path / "seq")]) == 0
    assert (tmp_path / "par/sweep.csv").read_bytes() == (tmp_path / "seq/sweep.csv").read_bytes()


# ---------------------------------------------------------------- gradcheck and entry point

def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--configs", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "mmd/generator" in out


def test_gradcheck_failure_exit_code(monkeypatch):
    from buda import gradcheck
    monkeypatch.setattr(gradcheck, "run_suite", lambda *a: {"fake": 1.0})
    assert main(["gradcheck"]) == EXIT_GRADCHECK


def test_module_entry_point(files, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "buda.cli", "eval", "--data", str(tmp_path / "missing"),
                           "--model", "x"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "error:" in proc.stderr

import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from resus import pipeline
from resus.checkpoint import save_checkpoint
from resus.cli import main
from resus.diagnostics import load_report, strip_timestamp
from resus.pruning import load_mask

GOLDEN = Path(__file__).parent / "golden" / "small_sweep.json"

SMALL = {
    "config_version": 1, "seed": 0,
    "arch": {"preset": "tiny-res", "width": 4},
    "dataset": {"num_classes": 4, "n_train": 256, "n_test": 128},
    "train": {"epochs": 2},
    "calib": {"n_images": 32, "b": 4, "batch_size": 16},
    "sweep": {"methods": ["asr"], "sparsities": [{"mode": "global_l1", "rate": 0.9}], "budgets": [4]},
}


def _config(tmp_path, doc, out="out"):
    doc = dict(doc, output_dir=str(tmp_path / out))
    path = tmp_path / f"{out}.json"
    path.write_text(json.dumps(doc))
    return path


def _files(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file()) \
        if root.exists() else []


@pytest.fixture(scope="session")
def fixture_ws(fixture_run, tmp_path_factory):
    cfg, net, dense, train, test = fixture_run
    root = tmp_path_factory.mktemp("ws")
    ws = pipeline.Workspace(root)
    pipeline.save_data(ws, train, test)
    save_checkpoint(ws.dense, net, dense)
    return root


@pytest.fixture
def ws_copy(fixture_ws, tmp_path):
    root = tmp_path / "ws"
    shutil.copytree(fixture_ws, root)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"output_dir": str(root)}))
    return root, str(cfg)


def test_missing_checkpoint_exits_2_and_writes_nothing(tmp_path, capsys):
    cfg = _config(tmp_path, SMALL)
    assert main(["prune", "--config", str(cfg), "--rate", "0.9"]) == 2
    assert "prune" in capsys.readouterr().err
    assert _files(tmp_path / "out") == []
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_invalid_config_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"repair": {"method": "magic"}}))
    assert main(["gen-data", "--config", str(bad)]) == 1


def test_indivisible_nm_exits_1_and_cleans_up(tmp_path, capsys):
    cfg = str(_config(tmp_path, SMALL))
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    before = _files(tmp_path / "out")
    assert main(["prune", "--config", cfg, "--mode", "nm", "--n", "2", "--m", "4"]) == 1
    assert "not divisible" in capsys.readouterr().err
    assert _files(tmp_path / "out") == before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_diverging_training_exits_3_without_checkpoint(tmp_path):
    doc = dict(SMALL, train={"epochs": 2, "lr": 1e12})
    cfg = str(_config(tmp_path, doc))
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 3
    assert not (tmp_path / "out" / "checkpoints" / "dense.ckpt").exists()


def test_degenerate_sweep_equals_individual_commands(tmp_path):
    a = str(_config(tmp_path, SMALL, "a"))
    for argv in (["gen-data"], ["train"], ["prune", "--rate", "0.9"],
                 ["repair", "--rate", "0.9", "--method", "asr"], ["eval", "--rate", "0.9", "--method", "asr"]):
        assert main(argv + ["--config", a]) == 0, argv
    b = str(_config(tmp_path, SMALL, "b"))
    assert main(["sweep", "--config", b]) == 0
    single = load_report(tmp_path / "a" / "reports" / "report.json")["results"]
    swept = load_report(tmp_path / "b" / "reports" / "sweep.json")["results"]
    assert len(single) == 1 and len(swept) == 1
    assert single[0] == swept[0]
    # artifacts of both routes agree byte for byte
    for rel in ("masks/l1-0.9.mask", "plans/l1-0.9-asr.json", "checkpoints/pruned-l1-0.9.ckpt"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_diagnose_writes_report(tmp_path):
    cfg = str(_config(tmp_path, SMALL))
    for argv in (["gen-data"], ["train"], ["prune", "--rate", "0.9"], ["repair", "--rate", "0.9"],
                 ["diagnose", "--rate", "0.9"]):
        assert main(argv + ["--config", cfg]) == 0, argv
    doc = json.loads((tmp_path / "out" / "reports" / "diagnostics-l1-0.9.json").read_text())
    assert doc["severity"] > 0 and doc["overshoot"] >= 0
    assert set(doc["slopes"]) == {"asr", "none"}
    assert "var_ratio_q25_asr" in doc["heatmap"][0]


def test_small_sweep_matches_golden_report(tmp_path):
    doc = dict(SMALL, sweep={"methods": ["bn_only", "layerwise", "asr"],
                             "sparsities": [{"mode": "global_l1", "rate": 0.5},
                                            {"mode": "global_l1", "rate": 0.9}],
                             "budgets": [2, 4]})
    cfg = str(_config(tmp_path, doc))
    assert main(["sweep", "--config", cfg]) == 0
    got = strip_timestamp(load_report(tmp_path / "out" / "reports" / "sweep.json"))
    if os.environ.get("RESUS_REGEN_GOLDEN"):
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_text(json.dumps(got, indent=1, sort_keys=True) + "\n")
    assert got == json.loads(GOLDEN.read_text())


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "resus.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "sweep" in out.stdout


@pytest.mark.slow
def test_prune_then_eval_is_below_dense(ws_copy, capsys):
    root, cfg = ws_copy
    assert main(["prune", "--config", cfg, "--rate", "0.9"]) == 0
    assert main(["eval", "--config", cfg, "--rate", "0.9", "--stage", "pruned"]) == 0
    assert main(["eval", "--config", cfg, "--stage", "dense"]) == 0
    rows = load_report(root / "reports" / "report.json")["results"]
    assert rows[0]["accuracy_top1"] < rows[1]["accuracy_top1"]
    assert rows[0]["accuracy_dense"] == rows[1]["accuracy_top1"]


@pytest.mark.slow
def test_bn_only_on_unpruned_model_keeps_accuracy(ws_copy):
    root, cfg = ws_copy
    assert main(["prune", "--config", cfg, "--rate", "0"]) == 0
    assert main(["repair", "--config", cfg, "--rate", "0", "--method", "bn_only"]) == 0
    assert main(["eval", "--config", cfg, "--rate", "0", "--method", "bn_only"]) == 0
    (row,) = load_report(root / "reports" / "report.json")["results"]
    assert abs(row["accuracy_top1"] - row["accuracy_dense"]) <= 0.005


@pytest.mark.slow
def test_default_sweep_rows_and_mask_pairing(ws_copy):
    root, cfg = ws_copy
    assert main(["sweep", "--config", cfg]) == 0
    rows = load_report(root / "reports" / "sweep.json")["results"]
    assert len(rows) == 36
    assert all(r["status"] == "ok" for r in rows)
    keys = [(r["sparsity"]["rate"], r["method"], r["calib"]["b"]) for r in rows]
    assert keys == sorted(keys) and len(set(keys)) == 36
    for rate in (0.5, 0.7, 0.9):
        digests = {r["sparsity"]["mask_sha256"] for r in rows if r["sparsity"]["rate"] == rate}
        assert len(digests) == 1
        assert digests == {load_mask(root / "masks" / f"l1-{rate:g}.mask").digest()}

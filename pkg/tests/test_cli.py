import csv
import json
from pathlib import Path

import pytest

from uniflow.cli import CONFIG_SCHEMA, apply_threads, main

TINY = {
    "gen": {"T": 300},
    "patch": {"d_model": 8, "num_subgraphs": 4},
    "model": {"enc_layers": 1, "dec_layers": 1, "heads": 2, "ff_mult": 2, "dropout": 0.0, "n_mem": 8},
    "train": {"max_epochs": 2, "lr_initial": 1e-3, "lr_late": 1e-4, "lr_switch_epoch": 2,
              "iters_per_epoch": 3, "val_max_windows": 4, "checkpoint_every": 1},
    "fractions": [0.05],
    "windows_per_dataset": 2,
}


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {**TINY, "data_dir": "data", "out": "run", "checkpoint": "run/model.ckpt"}
    (root / "run.json").write_text(json.dumps(cfg))
    assert run("gen", "--config", root / "run.json", "--out", root / "data", "--seed", 3) == 0
    assert run("train", "--config", root / "run.json") == 0
    return root


def test_gen_twice_is_byte_identical(tmp_path, capsys):
    assert run("gen", "--seed", 7, "--out", tmp_path / "a") == 0
    assert run("gen", "--seed", 7, "--out", tmp_path / "b") == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "manifest.json" in a and len(a) == 1 + 5 * 2 + 2  # manifest, meta + values each, edges for the 2 graphs
    manifest = json.loads(a["manifest.json"])
    assert manifest["target"] == "grid8x10_target" and len(manifest["train"]) == 4
    assert run("gen", "--seed", 8, "--out", tmp_path / "c") == 0
    assert tree_bytes(tmp_path / "c") != a
    status = json.loads(capsys.readouterr().out.splitlines()[0])
    assert status == {"command": "gen", "status": "ok", "out": str(tmp_path / "a")}


def test_train_run_directory(workspace):
    run_dir = workspace / "run"
    assert {p.name for p in run_dir.iterdir()} >= {"config.json", "loss.csv", "model.ckpt", "validation.json",
                                                   "checkpoints"}
    assert sorted(p.name for p in (run_dir / "checkpoints").iterdir()) == ["epoch_0001.ckpt", "epoch_0002.ckpt"]
    losses = rows(run_dir / "loss.csv")
    assert list(losses[0]) == ["step", "dataset", "loss"]
    assert [int(r["step"]) for r in losses] == list(range(len(losses)))
    assert {r["dataset"] for r in losses} == {"grid8x8", "grid10x12", "graph60", "graph120"}
    snap = json.loads((run_dir / "config.json").read_text())
    assert snap["train"] == TINY["train"] and len(snap["datasets"]) == 4


def test_config_snapshot_replays_training(workspace, tmp_path):
    snap = json.loads((workspace / "run" / "config.json").read_text())
    snap["out"] = str(tmp_path / "replay")
    (tmp_path / "replay.json").write_text(json.dumps(snap))
    assert run("train", "--config", tmp_path / "replay.json") == 0
    original, replay = tree_bytes(workspace / "run"), tree_bytes(tmp_path / "replay")
    original.pop("config.json"), replay.pop("config.json")  # differs only in "out"
    assert original == replay


def test_eval_one_row_per_dataset(workspace, tmp_path):
    assert run("eval", "--config", workspace / "run.json", "--protocol", "short", "--out", tmp_path) == 0
    model_rows, ha_rows = rows(tmp_path / "eval_short.csv"), rows(tmp_path / "eval_short_ha.csv")
    assert [r["dataset"] for r in model_rows] == ["grid8x8", "grid10x12", "graph60", "graph120"]
    assert {r["protocol"] for r in model_rows} == {"UniFlow-12->12"}
    assert len(ha_rows) == 4
    assert len(json.loads((tmp_path / "eval_short.json").read_text())) == 4
    assert not (tmp_path / "eval_short_noise.csv").exists()


def test_eval_is_reproducible_and_flags_override(workspace, tmp_path):
    for sub in ("a", "b"):
        assert run("eval", "--config", workspace / "run.json", "--out", tmp_path / sub, "--noise", 0.05) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    noisy = rows(tmp_path / "a" / "eval_short_noise.csv")
    assert {r["protocol"] for r in noisy} == {"noise=0.05"} and len(noisy) == 4


def test_shot_reports(workspace, tmp_path):
    assert run("shot", "--config", workspace / "run.json", "--out", tmp_path, "--fraction", 0.10) == 0
    labels = [r["protocol"] for r in rows(tmp_path / "shot.csv")]
    assert labels == ["zero-shot", "few-shot=0.1"]


def test_shot_rejects_training_dataset_as_target(workspace, tmp_path, capsys):
    cfg = json.loads((workspace / "run.json").read_text())
    cfg["target"] = str(workspace / "data" / "grid8x8")
    cfg["checkpoint"] = str(workspace / "run" / "model.ckpt")
    cfg.pop("data_dir")
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    assert run("shot", "--config", tmp_path / "bad.json", "--out", tmp_path) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ProvenanceError" and err["command"] == "shot"


def test_inspect_memory(workspace, tmp_path):
    assert run("inspect-memory", "--config", workspace / "run.json", "--out", tmp_path) == 0
    sigs = rows(tmp_path / "signatures.csv")
    assert len(sigs) == 4 * 2 and len(sigs[0]) == 2 + 4 * 8
    for r in sigs:
        vals = [float(v) for k, v in r.items() if k not in ("dataset", "window")]
        for b in range(4):
            assert sum(vals[8 * b:8 * (b + 1)]) == pytest.approx(1.0, abs=1e-5)
    cos = rows(tmp_path / "cosines.csv")
    assert len(cos) == 8 * 7 // 2
    assert all(-1.0 <= float(r["cosine"]) <= 1.0 for r in cos)


def test_ablate_units(workspace, tmp_path):
    cfg = {**TINY, "data_dir": str(workspace / "data"), "ablation": "units", "unit_counts": [8, 16],
           "train": {**TINY["train"], "max_epochs": 1}}
    (tmp_path / "u.json").write_text(json.dumps(cfg))
    assert run("ablate", "--config", tmp_path / "u.json", "--out", tmp_path / "r") == 0
    got = rows(tmp_path / "r" / "ablate_units.csv")
    assert [r["protocol"] for r in got] == ["units=8"] * 4 + ["units=16"] * 4


@pytest.mark.parametrize("argv, code, error", [
    (["bogus"], 2, "usage"),
    (["eval", "--protocol", "medium"], 2, "usage"),
    (["eval", "--config", "/nonexistent/run.json"], 1, "config_missing"),
    (["train", "--seed", "-1"], 1, "config_invalid"),
    (["shot", "--fraction", "1.5"], 1, "ValueError"),
    (["eval", "--noise", "-0.1"], 1, "ValueError"),
    (["eval", "--out", "/nonexistent/out", "--noise", "0"], 1, "missing_path"),
    (["train"], 1, "config_invalid"),
])
def test_errors_are_json(argv, code, error, capsys):
    assert main(argv) == code
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == error and isinstance(err["message"], str) and err["message"]


def test_bad_config_files(tmp_path, capsys):
    (tmp_path / "broken.json").write_text("{not json")
    (tmp_path / "extra.json").write_text(json.dumps({"unknown_key": 1}))
    (tmp_path / "types.json").write_text(json.dumps({"model": {"heads": "two"}}))
    (tmp_path / "missing.json").write_text(json.dumps({"datasets": ["nope"]}))
    (tmp_path / "invariant.json").write_text(json.dumps({**TINY, "datasets": [str(tmp_path)],
                                                         "model": {**TINY["model"], "heads": 3}}))
    expected = {"broken": "config_parse", "extra": "config_invalid", "types": "config_invalid",
                "missing": "missing_path", "invariant": "ValueError"}
    for stem, error in expected.items():
        assert main(["train", "--config", str(tmp_path / f"{stem}.json"), "--out", str(tmp_path / "o")]) == 1
        assert json.loads(capsys.readouterr().err)["error"] == error, stem


def test_threads_env(monkeypatch):
    import torch

    before = torch.get_num_threads()
    try:
        apply_threads({"UNIFLOW_THREADS": "1"})
        assert torch.get_num_threads() == 1
        apply_threads({})
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)
    monkeypatch.setenv("UNIFLOW_THREADS", "0")
    assert main(["gen"]) == 1


def test_schema_lists_every_flag():
    for key in ("seed", "out", "protocol", "noise", "fractions", "checkpoint", "datasets", "data_dir"):
        assert key in CONFIG_SCHEMA["properties"]

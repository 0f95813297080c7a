import json
from pathlib import Path

import numpy as np
import pytest

from matchseg.cli import main
from matchseg.data import load_manifest
from matchseg.prompting import read_prompt_records


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    """Synthetic dataset + a finished tiny training run."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    rc = main(["synth", "--out", str(ds), "--n-images", "12", "--image-size", "16",
               "--min-shapes", "2", "--seed", "3", "--labeled-count", "2",
               "--val-count", "2", "--test-count", "2"])
    assert rc == 0
    cfg = {
        "manifest": str(ds / "manifest.json"),
        "total_iterations": 4,
        "warmup_iterations": 2,
        "interactive_iterations": 2,
        "batch_size": 4,
        "image_size": 16,
        "seed": 0,
        "eval_every": 2,
        "checkpoint_every": 0,
        "network": {"depth": 2, "base_channels": 4, "convs_per_block": 1},
        "strategy": {"kind": "fixmatch"},
        "segmenter": {"kind": "oracle"},
    }
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    run_dir = root / "run"
    assert main(["train", "--config", str(cfg_path), "--run-dir", str(run_dir)]) == 0
    ckpt = run_dir / "checkpoints" / "iter_000004.ckpt"
    assert ckpt.exists()
    return root, ds, cfg_path, run_dir, ckpt


def test_synth_writes_layout_and_manifest(cli_env):
    _, ds, *_ = cli_env
    manifest = load_manifest(ds / "manifest.json")
    assert len(manifest.entries) == 12
    case = ds / manifest.entries[0].case_id
    assert (case / "img_000.png").exists()
    assert (case / "meta.json").exists()


def test_train_smoke_writes_metrics_rows(cli_env):
    root, ds, cfg_path, run_dir, ckpt = cli_env
    lines = (run_dir / "metrics.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 4
    resolved = json.loads((run_dir / "config.json").read_text())
    assert resolved["total_iterations"] == 4
    assert "manifest" in resolved


def test_train_missing_manifest_exits_one(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"manifest": str(tmp_path / "nope.json"),
                               "total_iterations": 2}))
    rc = main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "r")])
    assert rc == 1
    assert "nope.json" in capsys.readouterr().err


def test_train_unknown_config_key_exits_one(cli_env, tmp_path, capsys):
    root, ds, cfg_path, *_ = cli_env
    cfg = json.loads(cfg_path.read_text())
    cfg["strateggy"] = {"kind": "fixmatch"}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(cfg))
    rc = main(["train", "--config", str(bad), "--run-dir", str(tmp_path / "r")])
    assert rc == 1
    assert "strateggy" in capsys.readouterr().err


def test_train_override_switches_strategy(cli_env, tmp_path):
    root, ds, cfg_path, *_ = cli_env
    run_dir = tmp_path / "run_uni"
    rc = main(["train", "--config", str(cfg_path), "--run-dir", str(run_dir),
               "--override", "strategy.kind=unimatch",
               "--override", "total_iterations=2",
               "--override", "warmup_iterations=1",
               "--override", "interactive_iterations=1"])
    assert rc == 0
    resolved = json.loads((run_dir / "config.json").read_text())
    assert resolved["strategy"]["kind"] == "unimatch"
    assert resolved["total_iterations"] == 2


def test_rerun_from_resolved_config_reproduces_metrics(cli_env, tmp_path):
    root, ds, cfg_path, run_dir, ckpt = cli_env
    rerun_dir = tmp_path / "rerun"
    rc = main(["train", "--config", str(run_dir / "config.json"),
               "--run-dir", str(rerun_dir)])
    assert rc == 0
    assert (rerun_dir / "metrics.csv").read_bytes() == \
        (run_dir / "metrics.csv").read_bytes()


def test_evaluate_deterministic_and_consistent(cli_env, tmp_path, capsys):
    root, ds, cfg_path, run_dir, ckpt = cli_env
    out1 = tmp_path / "r1.json"
    out2 = tmp_path / "r2.json"
    for out in (out1, out2):
        rc = main(["evaluate", "--checkpoint", str(ckpt),
                   "--manifest", str(ds / "manifest.json"),
                   "--split", "test", "--out", str(out)])
        assert rc == 0
    assert out1.read_bytes() == out2.read_bytes()
    report = json.loads(out1.read_text())
    printed = capsys.readouterr().out
    assert f"{report['mean_dice']:.4f}" in printed


def test_evaluate_missing_checkpoint_exits_two(tmp_path, capsys):
    rc = main(["evaluate", "--checkpoint", str(tmp_path / "none.ckpt"),
               "--manifest", str(tmp_path / "m.json")])
    assert rc == 1
    assert "none.ckpt" in capsys.readouterr().err


def test_extract_prompts_record_per_image(cli_env, tmp_path):
    root, ds, cfg_path, run_dir, ckpt = cli_env
    out = tmp_path / "prompts.jsonl"
    out2 = tmp_path / "prompts2.jsonl"
    for dest in (out, out2):
        rc = main(["extract-prompts", "--checkpoint", str(ckpt),
                   "--manifest", str(ds / "manifest.json"),
                   "--split", "train_unlabeled", "--mode", "points",
                   "--seed", "5", "--out", str(dest)])
        assert rc == 0
    assert out.read_bytes() == out2.read_bytes()  # deterministic per seed
    records = read_prompt_records(out)
    manifest = load_manifest(ds / "manifest.json")
    assert len(records) == len(manifest.split_entries("train_unlabeled"))
    for rec in records:
        for entry in rec["classes"]:
            assert entry["points"] or entry["box"]


def test_refine_oracle_with_label_prompts_reaches_dice_one(cli_env, tmp_path):
    root, ds, cfg_path, run_dir, ckpt = cli_env
    out_dir = tmp_path / "refined"
    rc = main(["refine", "--checkpoint", str(ckpt),
               "--manifest", str(ds / "manifest.json"),
               "--split", "train_unlabeled", "--segmenter", "oracle",
               "--prompts-from", "labels", "--out-dir", str(out_dir)])
    assert rc == 0
    quality = json.loads((out_dir / "quality_report.json").read_text())
    assert quality["n_images"] == quality["n_with_reference"]
    for entry in quality["images"]:
        assert entry["dice_after"] == 1.0
    assert quality["mean_dice_after"] == 1.0
    # one PNG per image
    assert len(list(out_dir.glob("*.png"))) == quality["n_images"]


def test_refine_marks_missing_reference_absent(cli_env, tmp_path):
    root, ds, cfg_path, run_dir, ckpt = cli_env
    # strip label files from one unlabeled case to simulate truly unlabeled data
    manifest = load_manifest(ds / "manifest.json")
    entry = manifest.split_entries("train_unlabeled")[0]
    lbl = Path(manifest.dataset_root) / entry.case_id / "lbl_000.png"
    backup = lbl.read_bytes()
    try:
        lbl.unlink()
        out_dir = tmp_path / "refined_absent"
        rc = main(["refine", "--checkpoint", str(ckpt),
                   "--manifest", str(ds / "manifest.json"),
                   "--split", "train_unlabeled", "--segmenter", "toy",
                   "--out-dir", str(out_dir)])
        assert rc == 0
        quality = json.loads((out_dir / "quality_report.json").read_text())
        by_id = {e["image_id"]: e for e in quality["images"]}
        assert by_id[entry.sample_id]["reference"] == "absent"
        assert quality["n_with_reference"] == quality["n_images"] - 1
    finally:
        lbl.write_bytes(backup)


def test_report_prints_table(cli_env, capsys):
    root, ds, cfg_path, run_dir, ckpt = cli_env
    rc = main(["report", "--run-dir", str(run_dir)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "dice" in out and "test" in out


def test_manifest_command(cli_env, tmp_path):
    root, ds, *_ = cli_env
    out = tmp_path / "m2.json"
    rc = main(["manifest", "--dataset-root", str(ds), "--protocol", "custom",
               "--seed", "1", "--labeled-count", "1", "--train-count", "8",
               "--val-count", "2", "--test-count", "2", "--out", str(out)])
    assert rc == 0
    m = load_manifest(out)
    assert len(m.case_ids("train_labeled")) == 1


def test_convert_command(tmp_path):
    vol = np.random.default_rng(0).random((3, 16, 16))
    np.save(tmp_path / "v.npy", vol)
    rc = main(["convert", "--volume", str(tmp_path / "v.npy"),
               "--case-id", "conv0", "--out-root", str(tmp_path / "ds"),
               "--spacing", "1.0,1.5"])
    assert rc == 0
    assert len(list((tmp_path / "ds" / "conv0").glob("img_*.png"))) == 3


def test_unknown_command_exits_one(capsys):
    assert main(["frobnicate"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0

import json
import os
import subprocess
import sys

import pytest

from tsvod.aggregation import read_pgm

SPEC = dict(seed=2, num_sequences=2, frame_count=6, image_size=32, min_size=6, max_size=10)
CFG = dict(d=12, heads=3, num_queries=4, image_size=32, backbone_channels=[4, 6, 8],
           window_half=2, epochs=2, steps_per_epoch=2, eval_frames_per_sequence=2,
           score_threshold=0.0)


def tsvod(*args, env=None):
    full_env = {k: v for k, v in os.environ.items() if k != "PTSE_SEED"}
    full_env.update(env or {})
    return subprocess.run([sys.executable, "-m", "tsvod.cli", *map(str, args)],
                          capture_output=True, text=True, env=full_env)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    r = tsvod("gen-data", "--spec", root / "spec.json", "--out", root / "data")
    assert r.returncode == 0, r.stderr
    cfg = {**CFG, "train_data": str(root / "data"), "val_data": str(root / "data")}
    (root / "cfg.json").write_text(json.dumps(cfg))
    r = tsvod("train", "--config", root / "cfg.json", "--out", root / "run")
    assert r.returncode == 0, r.stderr
    return root


def test_train_writes_artifacts(workspace):
    run = workspace / "run"
    assert (run / "checkpoint.ptse").read_bytes()[:4] == b"PTSE"
    assert len((run / "train_log.csv").read_text().splitlines()) == 3
    assert json.loads((run / "config.json").read_text())["d"] == 12


def test_eval_report(workspace):
    r = tsvod("eval", "--checkpoint", workspace / "run/checkpoint.ptse",
              "--data", workspace / "data", "--report", workspace / "report.json")
    assert r.returncode == 0, r.stderr
    report = json.loads((workspace / "report.json").read_text())
    assert 0.0 <= report["mAP"] <= 1.0
    assert {"all", "occluded", "clean"} <= set(report["splits"])


def test_infer_jsonl(workspace):
    out = workspace / "dets.jsonl"
    r = tsvod("infer", "--checkpoint", workspace / "run/checkpoint.ptse",
              "--data", workspace / "data", "--out", out)
    assert r.returncode == 0, r.stderr
    lines = out.read_text().splitlines()
    assert lines
    rec = json.loads(lines[0])
    assert set(rec) == {"frame_id", "class_id", "score", "box"} and len(rec["box"]) == 4


def test_featmap_writes_pgm(workspace):
    out = workspace / "maps"
    r = tsvod("featmap", "--checkpoint", workspace / "run/checkpoint.ptse", "--sample", "1:3",
              "--stage", "R_t", "--out", out)
    assert r.returncode == 0, r.stderr
    img = read_pgm(out / "R_t_0.pgm")
    assert img.shape == (4, 4)


def test_featmap_usage_errors(workspace):
    ckpt = workspace / "run/checkpoint.ptse"
    assert tsvod("featmap", "--checkpoint", ckpt, "--sample", "0:1", "--stage", "Z_t",
                 "--out", workspace / "m").returncode == 1
    assert tsvod("featmap", "--checkpoint", ckpt, "--sample", "zero", "--stage", "R_t",
                 "--out", workspace / "m").returncode == 1
    assert tsvod("featmap", "--checkpoint", ckpt, "--sample", "9:0", "--stage", "R_t",
                 "--out", workspace / "m").returncode == 1


def test_env_seed_overrides_config(workspace):
    r = tsvod("train", "--config", workspace / "cfg.json", "--out", workspace / "run_seeded",
              env={"PTSE_SEED": "41"})
    assert r.returncode == 0, r.stderr
    assert json.loads((workspace / "run_seeded/config.json").read_text())["seed"] == 41
    assert (workspace / "run_seeded/train_log.csv").read_text() != \
        (workspace / "run/train_log.csv").read_text()


def test_exit_codes(workspace, tmp_path):
    assert tsvod().returncode in (0, 1)
    assert tsvod("no-such-command").returncode == 1
    assert tsvod("eval", "--checkpoint", tmp_path / "missing.ptse", "--data", workspace / "data",
                 "--report", tmp_path / "r.json").returncode == 2
    assert tsvod("eval", "--checkpoint", workspace / "run/checkpoint.ptse",
                 "--data", tmp_path / "nowhere", "--report", tmp_path / "r.json").returncode == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"d": 12, "mystery": 1}))
    assert tsvod("train", "--config", bad, "--out", tmp_path / "o").returncode == 1
    bad.write_text("{not json")
    assert tsvod("gen-data", "--spec", bad, "--out", tmp_path / "o").returncode == 1
    # corrupt checkpoints next to a valid config are usage errors
    (tmp_path / "config.json").write_bytes((workspace / "run/config.json").read_bytes())
    garbage = tmp_path / "garbage.ptse"
    garbage.write_bytes((workspace / "run/checkpoint.ptse").read_bytes()[:50])
    assert tsvod("eval", "--checkpoint", garbage, "--data", workspace / "data",
                 "--report", tmp_path / "r.json").returncode == 1


def test_gradcheck_command():
    r = tsvod("gradcheck", "--seed", "0", "--probes", "3")
    assert r.returncode == 0, r.stdout + r.stderr
    assert "0 failed" in r.stdout and "model_end_to_end" in r.stdout

"""Command-line interface: exit codes, outputs, determinism."""

import json
import os

import numpy as np
import pytest

from flowpose import cli


def _run(args):
    return cli.main(args)


def _write(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f)
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    assert _run(["gen-model", "--out", str(ws)]) == 0
    cfg = _write(ws / "gen.json", {"model": str(ws / "model.json"),
                                   "n_scenes": 12, "views": 1})
    assert _run(["gen-data", "--config", cfg, "--seed", "1",
                 "--out", str(ws)]) == 0
    tcfg = _write(ws / "train.json",
                  {"model": str(ws / "model.json"),
                   "dataset": str(ws / "dataset.jsonl"),
                   "train": {"phase1_epochs": 2, "phase2_epochs": 1}})
    assert _run(["train", "--config", tcfg, "--seed", "0", "--out", str(ws),
                 "--no-timestamp"]) == 0
    return ws


def test_version_and_help(capsys):
    assert _run(["--version"]) == 0
    out = capsys.readouterr().out
    assert "flowpose" in out
    assert _run(["--help"]) == 0
    out = capsys.readouterr().out
    # schema-derived help mentions every structured config key
    for key in ("phase1_epochs", "omega_beta", "pixel_scale", "k_transforms"):
        assert key in out


def test_unknown_command_exit_1():
    assert _run(["frobnicate"]) == 1


def test_missing_config_exit_1(tmp_path):
    assert _run(["gen-data", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)]) == 1


def test_unknown_config_key_exit_1(tmp_path):
    cfg = _write(tmp_path / "c.json", {"bogus_key": 1})
    assert _run(["gen-model", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_gen_model_and_data_outputs(workspace):
    assert (workspace / "model.json").exists()
    lines = (workspace / "dataset.jsonl").read_text().strip().split("\n")
    assert len(lines) == 12
    json.loads(lines[0])


def test_train_outputs(workspace):
    ck = json.loads((workspace / "checkpoint.json").read_text())
    assert "flow" in ck or "params" in ck or len(ck) > 0
    assert (workspace / "train_log.csv").read_text().count("\n") >= 3


def test_sample_command(workspace, tmp_path):
    cfg = _write(tmp_path / "s.json",
                 {"checkpoint": str(workspace / "checkpoint.json"),
                  "dataset": str(workspace / "dataset.jsonl"),
                  "scene": 0, "n": 4})
    assert _run(["sample", "--config", cfg, "--seed", "7",
                 "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "samples.json").read_text())
    assert len(doc["samples"]) == 5  # the mode plus n random draws
    assert doc["samples"][0]["is_mode"]


def test_solve_command(workspace, tmp_path):
    from flowpose import body, synth
    ds = synth.load_dataset(workspace / "dataset.jsonl")
    rec = ds[0]
    v = rec.views[0]
    cfg = _write(tmp_path / "p.json", {
        "model": str(workspace / "model.json"),
        "pose_init": [r.to_json() for r in rec.gt_state.pose],
        "observations": [{"anchors": v.anchors_2d.tolist(),
                          "scale": v.laplace_scale.tolist(),
                          "aux": v.aux_weight.tolist(),
                          "intrinsics": v.intrinsics.tolist()}]})
    assert _run(["solve", "--config", cfg, "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "solve_result.json").read_text())
    assert doc["weighted_rms_residual"] < 10.0
    assert len(doc["pose"]) == 8


def test_eval_command(workspace, tmp_path):
    cfg = _write(tmp_path / "e.json",
                 {"model": str(workspace / "model.json"),
                  "dataset": str(workspace / "dataset.jsonl"),
                  "checkpoint": str(workspace / "checkpoint.json"),
                  "n_samples": 3})
    assert _run(["eval", "--config", cfg, "--seed", "0",
                 "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert doc["summary"]["mpjpe_min"] <= doc["summary"]["mpjpe_mode"] + 1e-12


def test_selftest_command(tmp_path):
    assert _run(["selftest", "--seed", "0", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "selftest.json").read_text())
    assert doc["ok"]


def test_toy_fit_command(tmp_path):
    cfg = _write(tmp_path / "t.json", {"steps": 10, "batch": 16,
                                       "report_samples": 200})
    assert _run(["toy-fit", "--config", cfg, "--seed", "0",
                 "--out", str(tmp_path), "--no-timestamp"]) == 0
    doc = json.loads((tmp_path / "toy_report.json").read_text())
    assert np.isfinite(doc["nll_after"])


def test_cli_train_idempotent(workspace, tmp_path):
    tcfg = _write(tmp_path / "t.json",
                  {"model": str(workspace / "model.json"),
                   "dataset": str(workspace / "dataset.jsonl"),
                   "train": {"phase1_epochs": 2, "phase2_epochs": 1}})
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run(["train", "--config", tcfg, "--seed", "0",
                     "--out", str(out), "--no-timestamp"]) == 0
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()


def test_checkpoint_timestamp_only_difference(workspace, tmp_path):
    tcfg = _write(tmp_path / "t.json",
                  {"model": str(workspace / "model.json"),
                   "dataset": str(workspace / "dataset.jsonl"),
                   "train": {"phase1_epochs": 1, "phase2_epochs": 0}})
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run(["train", "--config", tcfg, "--seed", "0",
                     "--out", str(out)]) == 0
    da = json.loads((a / "checkpoint.json").read_text())
    db = json.loads((b / "checkpoint.json").read_text())
    da.pop("meta"), db.pop("meta")
    assert json.dumps(da) == json.dumps(db)

import json

import numpy as np
import pytest
from click.testing import CliRunner

from volrig.cli import main
from volrig.rig import parse_rig


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def cache_env(tmp_path, monkeypatch):
    monkeypatch.setenv("VOLRIG_CACHE", str(tmp_path / "cache"))
    return tmp_path


def run_ok(runner, args):
    res = runner.invoke(main, args, catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return res


def test_synth_writes_pair_and_manifest(runner, tmp_path):
    out = tmp_path / "data"
    run_ok(runner, ["synth", "--kind", "star", "--seed", "3", "--out", str(out)])
    assert (out / "star_3.obj").exists()
    assert (out / "star_3.rig").exists()
    manifest = json.loads((out / "star_3.manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 3
    assert len(manifest["outputs"]) == 2
    for entry in manifest["outputs"]:
        assert len(entry["sha256"]) == 64


def test_featurize_and_inspect(runner, tmp_path):
    data = tmp_path / "data"
    run_ok(runner, ["synth", "--kind", "star", "--seed", "0", "--out", str(data)])
    dump = tmp_path / "channels"
    res = run_ok(runner, ["featurize", str(data / "star_0.obj"),
                          "--resolution", "16", "--samples", "2000",
                          "--out", str(dump)])
    for name in ("sdf", "k1", "k2", "lsd", "lvd", "mask"):
        assert (dump / f"{name}.f32").exists(), name
    assert "occupied voxels" in res.output
    header = json.loads((dump / "header.json").read_text())
    assert header["resolution"] == 16
    out_img = tmp_path / "sdf.pgm"
    run_ok(runner, ["inspect", str(dump), "--channel", "sdf",
                    "--out", str(out_img)])
    assert out_img.read_bytes().startswith(b"P5\n")


def test_inspect_missing_channel_exit_2(runner, tmp_path):
    (tmp_path / "d").mkdir()
    res = CliRunner().invoke(main, ["inspect", str(tmp_path / "d"),
                                    "--channel", "nope", "--out",
                                    str(tmp_path / "x.pgm")])
    assert res.exit_code == 2


def test_featurize_missing_mesh_exit_2(runner, tmp_path):
    res = runner.invoke(main, ["featurize", str(tmp_path / "absent.obj"),
                               "--out", str(tmp_path / "o")])
    assert res.exit_code == 2


def test_train_predict_eval_roundtrip(runner, tmp_path, cache_env):
    data = tmp_path / "data"
    run_ok(runner, ["synth", "--kind", "star", "--seed", "0", "--out", str(data)])
    ckpt = tmp_path / "ckpt" / "model"
    run_ok(runner, ["train", "--data", str(data), "--iterations", "2",
                    "--resolution", "16", "--modules", "1",
                    "--out", str(ckpt)])
    assert (ckpt.parent / "model.json").exists()
    assert (ckpt.parent / "model.bin").exists()
    log = [json.loads(l) for l in
           (ckpt.parent / "model.loss.jsonl").read_text().splitlines()]
    assert [e["iteration"] for e in log] == [0, 1]
    assert all(np.isfinite(e["loss"]) for e in log)

    pred_dir = tmp_path / "pred"
    pred_dir.mkdir()
    maps = tmp_path / "maps"
    run_ok(runner, ["predict", str(data / "star_0.obj"),
                    "--checkpoint", str(ckpt),
                    "--dump-maps", str(maps),
                    "--out", str(pred_dir / "star_0.rig")])
    skel, _ = parse_rig(pred_dir / "star_0.rig")
    assert skel.n_joints >= 1
    assert (maps / "prob_joints.f32").exists()

    res = run_ok(runner, ["eval", "--pred", str(pred_dir), "--ref", str(data),
                          "--mesh", str(data),
                          "--out", str(tmp_path / "report.json")])
    assert "star_0" in res.output
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["shapes"][0]["name"] == "star_0"


def test_train_rejects_bad_config(runner, tmp_path):
    data = tmp_path / "data"
    run_ok(runner, ["synth", "--kind", "star", "--seed", "0", "--out", str(data)])
    res = runner.invoke(main, ["train", "--data", str(data), "--iterations", "-1",
                               "--out", str(tmp_path / "m")])
    assert res.exit_code == 1
    assert "bad training configuration" in res.output


def test_predict_missing_checkpoint_exit_2(runner, tmp_path):
    data = tmp_path / "data"
    run_ok(runner, ["synth", "--kind", "star", "--seed", "0", "--out", str(data)])
    res = runner.invoke(main, ["predict", str(data / "star_0.obj"),
                               "--checkpoint", str(tmp_path / "nope"),
                               "--out", str(tmp_path / "o.rig")])
    assert res.exit_code == 2
    assert "checkpoint not found" in res.output


def test_eval_missing_prediction_exit_2(runner, tmp_path):
    ref = tmp_path / "ref"
    run_ok(runner, ["synth", "--kind", "star", "--seed", "0", "--out", str(ref)])
    empty = tmp_path / "pred"
    empty.mkdir()
    res = runner.invoke(main, ["eval", "--pred", str(empty), "--ref", str(ref),
                               "--mesh", str(ref)])
    assert res.exit_code == 2


def test_train_deterministic_checkpoints(runner, tmp_path, cache_env):
    data = tmp_path / "data"
    run_ok(runner, ["synth", "--kind", "star", "--seed", "0", "--out", str(data)])
    for stem in ("a", "b"):
        run_ok(runner, ["train", "--data", str(data), "--iterations", "2",
                        "--resolution", "16", "--modules", "1",
                        "--out", str(tmp_path / stem)])
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.loss.jsonl").read_bytes() == \
        (tmp_path / "b.loss.jsonl").read_bytes()

import json
import subprocess
import sys

import pytest

from prnet.cli import main

TINY_MODEL = {"widths": [4, 4, 8, 8, 8], "neck_widths": [4, 6, 8], "neck": "prn", "prn.stages": 1, "seed": 0}
TINY_DATA = {"num_images": 4, "num_val": 2, "image_size": 64, "objects_per_image": [2, 4], "seed": 7}


@pytest.fixture
def cfgs(tmp_path):
    (tmp_path / "model.json").write_text(json.dumps(TINY_MODEL))
    (tmp_path / "data.json").write_text(json.dumps(TINY_DATA))
    (tmp_path / "train.json").write_text(json.dumps({"batch_size": 2, "epochs": 5}))
    return tmp_path


def test_no_arguments_prints_usage_exit_1(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_console_script_no_arguments():
    r = subprocess.run([sys.executable, "-m", "prnet.cli"], capture_output=True, text=True)
    assert r.returncode == 1 and "usage" in r.stderr


def test_unknown_flag_exit_1(capsys):
    assert main(["analyze", "--model", "x.json", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_runtime_error_exit_2(tmp_path, capsys):
    assert main(["analyze", "--model", str(tmp_path / "missing.json")]) == 2
    assert "missing.json" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text(json.dumps({"neck": "bifpn"}))
    assert main(["analyze", "--model", str(tmp_path / "bad.json")]) == 2


def test_analyze_stage_sweep(cfgs, capsys):
    assert main(["analyze", "--model", str(cfgs / "model.json"), "--input", "64", "--sweep", "stages",
                 "--csv", str(cfgs / "s.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 6 and out[0].split()[0] == "config"
    assert [line.split()[0] for line in out[2:]] == [f"stages={s}" for s in range(4)]
    rows = [line.split(",") for line in (cfgs / "s.csv").read_text().splitlines()[1:]]
    assert [r[0] for r in rows] == [f"stages={s}" for s in range(4)]
    params = [int(r[1]) for r in rows]
    macs = [int(r[2]) for r in rows]
    assert params == sorted(set(params)) and macs == sorted(set(macs))


def test_analyze_per_block_table(cfgs, capsys):
    assert main(["analyze", "--model", str(cfgs / "model.json"), "--input", "64"]) == 0
    out = capsys.readouterr().out
    assert "backbone.0.down" in out and "head.0" in out and "total" in out


def test_pipeline_gen_train_eval_export(cfgs, capsys):
    d, r = cfgs / "ds", cfgs / "run"
    assert main(["gen", "--spec", str(cfgs / "data.json"), "--out", str(d), "--ppm"]) == 0
    assert main(["train", "--data", str(d), "--model", str(cfgs / "model.json"), "--train", str(cfgs / "train.json"),
                 "--out", str(r), "--epochs", "1"]) == 0
    assert (r / "history.csv").read_text().count("\n") == 2
    assert main(["eval", "--data", str(d), "--ckpt", str(r / "best.json"), "--json", str(cfgs / "rep.json")]) == 0
    rep = json.loads((cfgs / "rep.json").read_text())
    assert set(rep) >= {"AP", "AP50", "AP75", "per_class", "num_images"} and rep["num_images"] == 2
    assert main(["export", "--ckpt", str(r / "best.json"), "--image", str(d / "images/00000.prnt"),
                 "--heatmap", "P3", "--out", str(cfgs / "h.pgm"), "--dets", str(cfgs / "d.json")]) == 0
    assert (cfgs / "h.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")
    assert isinstance(json.loads((cfgs / "d.json").read_text()), list)
    assert main(["export", "--ckpt", str(r / "best.json"), "--image", str(d / "ppm/00001.ppm"),
                 "--heatmap", "P2", "--out", str(cfgs / "h2.pgm")]) == 0


def test_eval_missing_split_exit_2(cfgs):
    d = cfgs / "ds"
    spec = dict(TINY_DATA, num_val=0)
    (cfgs / "noval.json").write_text(json.dumps(spec))
    assert main(["gen", "--spec", str(cfgs / "noval.json"), "--out", str(d)]) == 0
    assert main(["train", "--data", str(d), "--model", str(cfgs / "model.json"), "--out", str(cfgs / "r"),
                 "--epochs", "1"]) == 0
    assert main(["eval", "--data", str(d), "--ckpt", str(cfgs / "r/last.json")]) == 2
    assert main(["eval", "--data", str(d), "--ckpt", str(cfgs / "r/last.json"), "--split", "train"]) == 0


def test_seed_env_overrides(cfgs, monkeypatch):
    monkeypatch.setenv("PRNET_SEED", "7")
    spec = dict(TINY_DATA, seed=99)
    (cfgs / "s99.json").write_text(json.dumps(spec))
    assert main(["gen", "--spec", str(cfgs / "s99.json"), "--out", str(cfgs / "a")]) == 0
    monkeypatch.delenv("PRNET_SEED")
    assert main(["gen", "--spec", str(cfgs / "data.json"), "--out", str(cfgs / "b")]) == 0
    assert (cfgs / "a/images/00000.prnt").read_bytes() == (cfgs / "b/images/00000.prnt").read_bytes()


def test_demo_degrade(cfgs):
    d = cfgs / "ds"
    assert main(["gen", "--spec", str(cfgs / "data.json"), "--out", str(d)]) == 0
    assert main(["demo-degrade", "--image", str(d / "images/00000.prnt"), "--out", str(cfgs / "deg")]) == 0
    rows = (cfgs / "deg/degrade.csv").read_text().splitlines()
    assert rows[0] == "factor,mae"
    mae = [float(x.split(",")[1]) for x in rows[1:]]
    assert mae[0] == 0.0 and mae == sorted(mae)
    assert (cfgs / "deg/degrade_x8.ppm").exists()

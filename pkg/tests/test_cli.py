import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gcanet.cli import main
from gcanet.model import GCANet, ModelConfig, save_checkpoint, sidecar
from gcanet.synth import MANIFEST, read_manifest, read_png, write_png


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "gcanet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "synth" in proc.stdout and "analyze" in proc.stdout


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--bogus"])
    assert info.value.code == 2


def test_synth_writes_pairs(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path, "--count", 64, "--size", 32, "--seed", 7)
    assert code == 0
    assert len(list(tmp_path.glob("*.png"))) == 128
    rows = read_manifest(tmp_path / MANIFEST)
    assert len(rows) == 64 and rows[0]["mode"] == "depth_ramp"
    assert (tmp_path / "run.meta").exists()


def test_synth_rain(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--out", tmp_path, "--count", 3, "--size", 24, "--rain")
    assert code == 0
    assert len(list(tmp_path.glob("rainy_*.png"))) == 3
    assert read_manifest(tmp_path / MANIFEST)[0]["A"] == "-"


def test_synth_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        run(capsys, "synth", "--out", tmp_path / d, "--count", 4, "--size", 24, "--seed", 3,
            "--mode", "perlin_t")
    names = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != "run.meta")
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir() if p.name != "run.meta")
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_synth_bad_size_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out", tmp_path, "--size", 8)
    assert code == 2 and "error" in err


def test_analyze_rf(capsys):
    code, out, _ = run(capsys, "analyze", "--rf", "d3x2")
    assert code == 0 and out.strip() == "5"
    code, out, _ = run(capsys, "analyze", "--rf", "d3x2,d3x4")
    assert out.strip() == "13"


def test_analyze_report(capsys):
    code, out, _ = run(capsys, "analyze", "--chain", "d3x2", "--indices", "0,1,2", "--extent", 16)
    data = json.loads(out)
    assert code == 0 and data["gridding"] is True
    assert data["dependency_sets"]["0"] == [0, 2, 4]
    code, out, _ = run(capsys, "analyze", "--chain", "sd3x2", "--extent", 16)
    assert json.loads(out)["gridding"] is False


def test_analyze_default_chain_and_json(tmp_path, capsys):
    code, out, _ = run(capsys, "analyze", "--json", tmp_path / "r.json", "--extent", 256)
    assert code == 0 and "gridding=false" in out
    assert json.loads((tmp_path / "r.json").read_text())["receptive_field"] == 125
    code, out, _ = run(capsys, "analyze", "--no-smooth", "--extent", 256)
    data = json.loads(out)
    assert "p" not in data["chain"] and data["receptive_field"] == 1 + 2 * (3 * 2 + 3 * 4 + 1) * 2


def test_analyze_syntax_error_exit_2(capsys):
    code, _, err = run(capsys, "analyze", "--rf", "d3y2")
    assert code == 2
    assert "^" in err


def test_analyze_png(tmp_path, capsys):
    img = np.random.default_rng(0).random((3, 16, 16))
    write_png(tmp_path / "a.png", img)
    write_png(tmp_path / "b.png", img[:, ::-1])
    code, _, _ = run(capsys, "analyze", "--chain", "d3x2", "--extent", 16, "--png", tmp_path / "p.png",
                     "--before", tmp_path / "a.png", "--after", tmp_path / "b.png")
    assert code == 0
    assert read_png(tmp_path / "p.png").shape == (3, 36, 36)


def _identity_checkpoint(path):
    model = GCANet(ModelConfig(base_channels=4, dilation_schedule=(1,)))
    model.out_conv.weight.assign(np.zeros(model.out_conv.weight.shape))
    save_checkpoint(model, path)
    return path


def test_eval_identical_dirs(tmp_path, capsys):
    for d in ("p", "r"):
        (tmp_path / d).mkdir()
    img = np.random.default_rng(0).random((3, 16, 16))
    for name in ("x.png", "y.png"):
        write_png(tmp_path / "p" / name, img)
        write_png(tmp_path / "r" / name, img)
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "p", "--ref", tmp_path / "r",
                       "--csv", tmp_path / "t.csv")
    assert code == 0
    mean = [l for l in out.splitlines() if l.startswith("mean")][0].split("\t")
    assert float(mean[1]) == 99.0 and float(mean[2]) == 1.0
    with open(tmp_path / "t.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_eval_dataset_with_checkpoint(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "d", "--count", 2, "--size", 24)
    ckpt = _identity_checkpoint(tmp_path / "m.gcat")
    _, plain, _ = run(capsys, "eval", "--data", tmp_path / "d")
    _, restored, _ = run(capsys, "eval", "--data", tmp_path / "d", "--ckpt", ckpt)
    assert plain == restored


def test_eval_needs_inputs(capsys):
    code, _, _ = run(capsys, "eval")
    assert code == 2


def test_infer_identity_checkpoint(tmp_path, capsys):
    ckpt = _identity_checkpoint(tmp_path / "m.gcat")
    img = np.random.default_rng(1).random((3, 15, 21))
    write_png(tmp_path / "in.png", img)
    code, _, _ = run(capsys, "infer", "--in", tmp_path / "in.png", "--ckpt", ckpt,
                     "--out", tmp_path / "out" / "o.png")
    assert code == 0
    assert (tmp_path / "out" / "o.png").read_bytes() == (tmp_path / "in.png").read_bytes() or \
        np.array_equal(read_png(tmp_path / "out" / "o.png"), read_png(tmp_path / "in.png"))


def test_infer_directory(tmp_path, capsys):
    ckpt = _identity_checkpoint(tmp_path / "m.gcat")
    (tmp_path / "in").mkdir()
    for i in range(2):
        write_png(tmp_path / "in" / f"{i}.png", np.random.default_rng(i).random((3, 16, 16)))
    code, _, _ = run(capsys, "infer", "--in", tmp_path / "in", "--ckpt", ckpt, "--out", tmp_path / "o")
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "o").glob("*.png")) == ["0.png", "1.png"]


def test_missing_checkpoint_exit_3(tmp_path, capsys):
    write_png(tmp_path / "in.png", np.zeros((3, 8, 8)))
    code, _, err = run(capsys, "infer", "--in", tmp_path / "in.png", "--ckpt", tmp_path / "none.gcat",
                       "--out", tmp_path / "o.png")
    assert code == 3 and "I/O" in err


def test_corrupt_checkpoint_exit_3(tmp_path, capsys):
    ckpt = _identity_checkpoint(tmp_path / "m.gcat")
    ckpt.write_bytes(b"junk")
    write_png(tmp_path / "in.png", np.zeros((3, 8, 8)))
    code, _, _ = run(capsys, "infer", "--in", tmp_path / "in.png", "--ckpt", ckpt, "--out", tmp_path / "o.png")
    assert code == 3


def test_mismatched_checkpoint_exit_4(tmp_path, capsys):
    ckpt = _identity_checkpoint(tmp_path / "m.gcat")
    sidecar(ckpt).write_text(ModelConfig(base_channels=8, dilation_schedule=(1,)).to_text())
    write_png(tmp_path / "in.png", np.zeros((3, 8, 8)))
    code, _, err = run(capsys, "infer", "--in", tmp_path / "in.png", "--ckpt", ckpt, "--out", tmp_path / "o.png")
    assert code == 4 and "mismatch" in err


def test_train_and_resume(tmp_path, capsys):
    run(capsys, "synth", "--out", tmp_path / "d", "--count", 4, "--size", 16)
    run(capsys, "synth", "--out", tmp_path / "v", "--count", 1, "--size", 16, "--start-index", 50)
    cfg = tmp_path / "run.cfg"
    cfg.write_text("base_channels=4\ndilation_schedule=2,1\nepochs=1\nbatch_size=4\n")
    common = ["--data", tmp_path / "d", "--val", tmp_path / "v", "--crop", 16]
    code, out, _ = run(capsys, "--config", cfg, "train", *common, "--out", tmp_path / "t")
    assert code == 0 and "epochs=1" in out
    meta = (tmp_path / "t" / "run.meta").read_text()
    assert "ModelConfig.base_channels=4" in meta and "TrainConfig.epochs=1" in meta
    code, out, _ = run(capsys, "--config", cfg, "train", *common, "--out", tmp_path / "t",
                       "--epochs", 2, "--resume", tmp_path / "t" / "last.gcat")
    assert code == 0 and "epochs=2" in out


def test_train_bad_config_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("norm_kind=group\n")
    code, _, _ = run(capsys, "--config", cfg, "train", "--data", tmp_path, "--out", tmp_path / "o")
    assert code == 2

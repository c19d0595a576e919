import hashlib
import subprocess
import sys

import numpy as np
import pytest

from facedapt import cli
from facedapt.encoder import init_encoder, load_encoder, save_encoder
from facedapt.evalmetrics import read_report


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "--out", root / "d", "--seed", 7, "--frames", 6, "--lab-frames", 4,
               "--latent-dim", 4, "--image-size", 32) == 0
    return root


@pytest.fixture(scope="module")
def pretrained(data):
    model = data / "pre.bin"
    assert run("pretrain", "--lab", data / "d" / "lab", "--out-model", model, "--epochs", 2) == 0
    return model


def test_gen_deterministic(data, tmp_path, capsys):
    assert run("gen", "--out", tmp_path / "d", "--seed", 7, "--frames", 6, "--lab-frames", 4,
               "--latent-dim", 4, "--image-size", 32) == 0
    out = capsys.readouterr().out
    assert "wild: 6 frames" in out
    assert tree_hash(tmp_path / "d") == tree_hash(data / "d")
    assert len(list((tmp_path / "d" / "wild" / "frames").iterdir())) == 6


def test_gen_requires_out(capsys):
    with pytest.raises(SystemExit) as exc:
        run("gen", "--seed", 1)
    assert exc.value.code == 2


def test_bad_image_size(tmp_path):
    assert run("gen", "--out", tmp_path, "--image-size", 40) == 2


def test_pretrain_outputs(pretrained, data):
    rows = (data / "pre_history.csv").read_text().splitlines()
    assert rows[0] == "step,L_z,L_H,L_view,total"
    # 4 instants, batch 8 -> one step per epoch
    assert len(rows) - 1 == 2
    cfg = (data / "pre.config.txt").read_text()
    assert "epochs = 2" in cfg and "lambda_view = 10.0" in cfg


def test_pretrain_zero_epochs_is_init(data, tmp_path):
    model = tmp_path / "m.bin"
    assert run("pretrain", "--lab", data / "d" / "lab", "--out-model", model, "--epochs", 0, "--seed", 3) == 0
    ref = tmp_path / "ref.bin"
    save_encoder(init_encoder(4, 8, seed=3, image_size=32), ref)
    assert model.read_bytes() == ref.read_bytes()
    assert (tmp_path / "m_history.csv").read_text().splitlines() == ["step,L_z,L_H,L_view,total"]


def test_config_file_and_override(data, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 5\nlearning_rate = 0.002  # faster\nlambda_view = 3\n")
    model = tmp_path / "m.bin"
    assert run("pretrain", "--lab", data / "d" / "lab", "--out-model", model, "--config", cfg, "--epochs", 1) == 0
    text = (tmp_path / "m.config.txt").read_text()
    assert "epochs = 1" in text and "learning_rate = 0.002" in text and "lambda_view = 3.0" in text


def test_unknown_config_key(data, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochz = 5\n")
    assert run("pretrain", "--lab", data / "d" / "lab", "--out-model", tmp_path / "m.bin", "--config", cfg) == 2


def test_adapt_none_is_byte_equal(pretrained, data, tmp_path):
    out = tmp_path / "none.bin"
    assert run("adapt", "--model", pretrained, "--wild", data / "d" / "wild", "--arm", "none", "--out-model", out) == 0
    assert out.read_bytes() == pretrained.read_bytes()


def test_adapt_flrc_config_and_colour_file(pretrained, data, tmp_path):
    out = tmp_path / "flrc.bin"
    assert run("adapt", "--model", pretrained, "--wild", data / "d" / "wild", "--arm", "flrc",
               "--out-model", out, "--epochs", 1) == 0
    cfg = (tmp_path / "flrc.config.txt").read_text()
    assert "lambda_cftc = 0.0" in cfg and "lambda_motc = 0.0" in cfg and "lambda_flrc = 1.0" in cfg
    vals = (tmp_path / "flrc.color.txt").read_text().split()
    assert len(vals) == 9 and all(np.isfinite(float(v)) for v in vals)
    rows = (tmp_path / "flrc_history.csv").read_text().splitlines()
    assert len(rows) - 1 == 5


def test_eval_three_arms(pretrained, data, tmp_path):
    paths = {}
    for arm in ("none", "flrc", "full"):
        paths[arm] = tmp_path / f"{arm}.bin"
        assert run("adapt", "--model", pretrained, "--wild", data / "d" / "wild", "--arm", arm,
                   "--out-model", paths[arm], "--epochs", 1) == 0
    report = tmp_path / "rep" / "report.csv"
    argv = ["eval", "--wild", data / "d" / "wild", "--report", report]
    for name, arm in (("no_DA", "none"), ("flrc_only", "flrc"), ("full_DA", "full")):
        argv += ["--model", f"{name}={paths[arm]}"]
    assert run(*argv) == 0
    rows = read_report(report)
    assert [r.arm for r in rows] == ["no_DA", "flrc_only", "full_DA"]
    assert all(np.isfinite(r.stability) and np.isfinite(r.reprojection) for r in rows)
    assert (tmp_path / "rep" / "strip_full_DA.ppm").exists()


def test_eval_without_sidecar(pretrained, tmp_path):
    assert run("gen", "--out", tmp_path / "d", "--seed", 7, "--frames", 5, "--lab-frames", 3,
               "--latent-dim", 4, "--image-size", 32, "--no-sidecar") == 0
    assert not (tmp_path / "d" / "wild" / "sidecar_gt.bin").exists()
    report = tmp_path / "report.csv"
    assert run("eval", "--model", pretrained, "--wild", tmp_path / "d" / "wild", "--report", report) == 0
    row = read_report(report)[0]
    assert np.isfinite(row.stability) and np.isfinite(row.reprojection)


def test_render_one_overlay_per_frame(pretrained, data, tmp_path):
    assert run("render", "--model", pretrained, "--seq", data / "d" / "wild", "--out-dir", tmp_path / "ov") == 0
    assert len(list((tmp_path / "ov").glob("*.ppm"))) == 6


def test_missing_model_is_runtime_error(data, tmp_path):
    assert run("render", "--model", tmp_path / "nope.bin", "--seq", data / "d" / "wild", "--out-dir", tmp_path) == 1


def test_missing_dataset_file(data, tmp_path, pretrained):
    import shutil

    shutil.copytree(data / "d" / "wild", tmp_path / "w")
    (tmp_path / "w" / "landmarks.csv").unlink()
    assert run("adapt", "--model", pretrained, "--wild", tmp_path / "w", "--out-model", tmp_path / "x.bin") == 1


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "facedapt.cli", "adapt"], capture_output=True, text=True)
    assert res.returncode == 2 and "usage" in res.stderr

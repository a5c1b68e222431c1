import hashlib
import json

import numpy as np
import pytest

from dynroi import cli
from dynroi import data as D
from dynroi import engine as E
from dynroi.config import ConfigError, RunConfig, parse_config
from dynroi.metrics import EvalReport
from dynroi.train import Checkpoint, save_checkpoint

TINY = """\
# desk-sized smoke configuration
model = wroim
frame = 32
depth = 2
base_channels = 2
weak_base_channels = 2
epochs = 2
seed = 3
validation = train   # reuse the training samples
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert run("synth", "--count", 3, "--seed", 7, "--size", 32, "--out", root) == 0
    return root


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.txt"
    path.write_text(TINY)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, ds, cfg_file):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--config", cfg_file, "--data", ds, "--out", out) == 0
    return out


# ----------------------------------------------------------------- config


def test_config_defaults_and_comments():
    cfg = parse_config(TINY)
    assert (cfg.model, cfg.frame, cfg.epochs, cfg.validation) == ("wroim", 32, 2, "train")
    assert cfg.lr == RunConfig().lr and cfg.clahe is True
    assert parse_config("") == RunConfig()


def test_config_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"cfg:3: unknown key 'lr_rate'"):
        parse_config("model=psbn\n\nlr_rate=0.1\n", "cfg")


@pytest.mark.parametrize("text,match", [
    ("epochs=ten", "line|:1"), ("augment=maybe", "boolean"), ("just words", "key=value"), ("model=unet", "model"),
])
def test_config_bad_values(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text, "cfg")


def test_config_dump_round_trips():
    cfg = parse_config(TINY)
    assert parse_config(cfg.dumps()) == cfg


def test_config_builds_each_model():
    for kind in ("psbn", "wroim", "twomodel"):
        mc = parse_config(f"model={kind}\nframe=64\ndepth=2\nbase_channels=4").model_config()
        assert mc.frame == 64


def test_help_documents_every_key(capsys):
    with pytest.raises(SystemExit):
        run("train", "--help")
    text = capsys.readouterr().out
    for name in RunConfig.__dataclass_fields__:
        assert f"  {name} = " in text


# ------------------------------------------------------------------ synth


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_layout_and_determinism(tmp_path):
    assert run("synth", "--count", 8, "--seed", 7, "--size", 128, "--out", tmp_path / "a") == 0
    assert run("synth", "--count", 8, "--seed", 7, "--size", 128, "--out", tmp_path / "b") == 0
    for sub in (D.IMAGE_DIR, D.DISC_DIR, D.CUP_DIR):
        assert len(list((tmp_path / "a" / sub).glob("*.png"))) == 8
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_synth_zero_count(tmp_path, capsys):
    assert run("synth", "--count", 0, "--out", tmp_path) == 1
    assert "count must be positive" in capsys.readouterr().err


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--bogus")
    assert exc.value.code == 1


# ------------------------------------------------------------------ train


def test_train_emits_artifacts(trained):
    for name in ("best.ckpt", "history.csv", "summary.json", "config.txt"):
        assert (trained / name).is_file()
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["param_count"] > 0 and 0 <= summary["degenerate_crop_rate"] <= 1
    assert set(summary["full_size_presets"]) == {"wroim", "psbn", "twomodel"}
    assert all(p["within_factor_3"] for p in summary["full_size_presets"].values())


def test_train_rerun_gives_identical_history(tmp_path, ds, cfg_file, trained):
    assert run("train", "--config", cfg_file, "--data", ds, "--out", tmp_path) == 0
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_train_twomodel_param_count_is_sum(tmp_path, ds, cfg_file):
    assert run("train", "--config", cfg_file, "--data", ds, "--out", tmp_path, "--model", "twomodel",
               "--epochs", 1) == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["param_count"] == s["param_count_disc"] + s["param_count_cup"]


def test_train_config_error_exit(tmp_path, ds, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("frame=32\nlearning_rate=1\n")
    assert run("train", "--config", bad, "--data", ds, "--out", tmp_path / "o") == 1
    assert "bad.txt:2" in capsys.readouterr().err


# ------------------------------------------------------------------- eval


def test_eval_writes_six_column_report(tmp_path, ds, cfg_file, trained, capsys):
    assert run("eval", "--config", cfg_file, "--ckpt", trained / "best.ckpt", "--data", ds,
               "--out", tmp_path / "report.csv") == 0
    text = (tmp_path / "report.csv").read_text()
    assert all(len(line.split(",")) == 6 for line in text.strip().split("\n"))
    assert len(EvalReport.from_csv(text).rows) == 3
    out = capsys.readouterr().out
    assert "disc dice" in out and "images/sec" in out


def test_eval_missing_mask_directory(tmp_path, cfg_file, trained, capsys):
    root = tmp_path / "ds"
    D.write_dataset(D.gen_synthetic(1, 0, 32), root)
    for p in (root / D.CUP_DIR).iterdir():
        p.unlink()
    (root / D.CUP_DIR).rmdir()
    assert run("eval", "--config", cfg_file, "--ckpt", trained / "best.ckpt", "--data", root,
               "--out", tmp_path / "r") == 2
    assert str(root / D.CUP_DIR) in capsys.readouterr().err


def test_eval_incompatible_checkpoint(tmp_path, ds, cfg_file, trained, capsys):
    other = tmp_path / "other.txt"
    other.write_text(TINY.replace("base_channels = 2", "base_channels = 4"))
    assert run("eval", "--config", other, "--ckpt", trained / "best.ckpt", "--data", ds, "--out", tmp_path) == 2
    assert "configuration" in capsys.readouterr().err


# ------------------------------------------------------------------ infer


def _sidecar(path):
    return dict(line.split("=", 1) for line in path.read_text().split())


def test_infer_outputs(tmp_path, ds, cfg_file, trained):
    image = ds / D.IMAGE_DIR / "syn0000.png"
    assert run("infer", "--config", cfg_file, "--ckpt", trained / "best.ckpt", "--image", image,
               "--out", tmp_path) == 0
    disc = D.read_mask(tmp_path / "disc.png")
    cup = D.read_mask(tmp_path / "cup.png")
    assert not (cup & (1 - disc)).any()
    side = _sidecar(tmp_path / "window.txt")
    assert {"row0", "col0", "height", "width", "degenerate", "cdr"} <= set(side)
    assert side["degenerate"] in ("true", "false")


def test_infer_marks_degenerate_crop(tmp_path, ds, cfg_file):
    cfg = parse_config(cfg_file.read_text())
    model = cli._model_from(cfg)
    model.params["weak.dec.head.b"].data[:] = -100.0
    save_checkpoint(Checkpoint.from_model(model), tmp_path / "dead.ckpt")
    assert run("infer", "--config", cfg_file, "--ckpt", tmp_path / "dead.ckpt",
               "--image", ds / D.IMAGE_DIR / "syn0001.png", "--out", tmp_path / "o") == 0
    assert _sidecar(tmp_path / "o" / "window.txt")["degenerate"] == "true"


def test_infer_unreadable_image(tmp_path, cfg_file, trained, capsys):
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not an image")
    assert run("infer", "--config", cfg_file, "--ckpt", trained / "best.ckpt", "--image", junk,
               "--out", tmp_path / "o") == 2
    assert "cannot read image" in capsys.readouterr().err


# -------------------------------------------------------------- checkgrad


def test_checkgrad_lists_every_op_once(capsys):
    assert run("checkgrad", "--seed", 0, "--trials", 3) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    names = [line.split()[1] for line in lines[:-1]]
    for op in E.DIFFERENTIABLE_OPS:
        assert names.count(op) == 1
    assert {"model:psbn", "model:wroim"} <= set(names)


def test_checkgrad_fails_on_conv_sign_bug(monkeypatch, capsys):
    original = E._conv2d_backward
    monkeypatch.setattr(E, "_conv2d_backward", lambda *a: (lambda r: (-r[0], r[1], r[2]))(original(*a)))
    assert run("checkgrad", "--trials", 2) == 3
    assert "FAIL conv2d" in capsys.readouterr().out

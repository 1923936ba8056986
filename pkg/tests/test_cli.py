import numpy as np
import pytest

from deferred_diffusion import head
from deferred_diffusion.cli import main
from deferred_diffusion.config import ConfigError, load_config
from deferred_diffusion.imageio import load_png

from conftest import TINY_SCENE, TINY_TRAIN

CONFIG = """
[scene]
{scene}

[train]
{train}

[eval]
steps = 2

[paths]
corpus = {root}/corpus
base = {root}/base.ckpt
checkpoint = {root}/avatar.ckpt
"""


def _fmt(d):
    return "\n".join(f"{k} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in d.items())


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    train = {**TINY_TRAIN, "steps": 3, "pretrain_steps": 3}
    (root / "run.ini").write_text(CONFIG.format(scene=_fmt(TINY_SCENE), train=_fmt(train), root=root))
    return root


def test_config_file_and_overrides(workdir):
    cfg = load_config(workdir / "run.ini", ["train.steps=7", "scene.seed=4"])
    assert cfg.train.steps == 7 and cfg.scene.seed == 4
    assert cfg.train.channel_mult == (1, 2) and cfg.scene.image_size == 16
    assert cfg.eval.steps == 2 and cfg.paths["corpus"].endswith("corpus")
    assert load_config(None).train.lr_atlas == 1e-2
    for bad in (["train.nope=1"], ["train.steps"], ["other.x=1"], ["train.augment=maybe"], ["train.batch_size=0"]):
        with pytest.raises(ConfigError):
            load_config(None, bad)
    with pytest.raises(ConfigError):
        load_config(workdir / "missing.ini")


def test_full_workflow(workdir, capsys):
    ini = ["--config", str(workdir / "run.ini")]
    assert main(["synth-data", *ini]) == 0
    assert (workdir / "corpus" / "scene.txt").exists()
    assert main(["pretrain", *ini]) == 0
    assert main(["train", *ini]) == 0
    assert (workdir / "avatar.ckpt").exists()

    assert main(["render", *ini, "--z-exp", "0.5,0,0,0,0,0,0,0.3", "--camera", "1",
                 "--out", str(workdir / "one.png")]) == 0
    assert load_png(workdir / "one.png").shape == (16, 16, 3)

    assert main(["reenact", *ini, "--out", str(workdir / "self")]) == 0
    assert "psnr_mean.holdout-view" in (workdir / "self" / "report.txt").read_text()
    assert main(["eval", *ini, "--rendered", str(workdir / "self"), "--out", str(workdir / "scored")]) == 0
    # scoring the saved PNGs reproduces the report up to 8-bit quantization
    a = (workdir / "self" / "report.json").read_text()
    b = (workdir / "scored" / "report.json").read_text()
    assert a != b and "holdout-expression" in b

    codes = np.random.default_rng(0).uniform(-0.5, 0.5, (4, head.D_EXP))
    np.savetxt(workdir / "driving.txt", codes)
    assert main(["animate", *ini, "--driving", str(workdir / "driving.txt"), "--out", str(workdir / "anim")]) == 0
    assert len(list((workdir / "anim" / "frames").glob("*.png"))) == 4
    assert main(["slice", str(workdir / "anim" / "frames"), "--column", "8", "--rows", "2:14",
                 "--out", str(workdir / "slice.png")]) == 0
    assert load_png(workdir / "slice.png").shape == (12, 4, 3)
    capsys.readouterr()


def test_fit_command(tmp_path, capsys):
    z_exp = np.zeros(head.D_EXP)
    z_exp[head.JAW] = 0.4
    head.export_obj(head.build_mesh(np.zeros(head.D_ID), z_exp), tmp_path / "m.obj")
    assert main(["fit", str(tmp_path / "m.obj"), "--samples", "400", "--iters", "15",
                 "--out", str(tmp_path / "codes.txt")]) == 0
    text = (tmp_path / "codes.txt").read_text()
    assert "z_exp" in text and "residual" in text
    capsys.readouterr()


def test_exit_codes(workdir, tmp_path, capsys):
    assert main([]) == 2
    assert main(["nonsense"]) == 2
    assert main(["train", "--set", "train.bogus=1"]) == 2
    assert main(["train", "--corpus", str(tmp_path / "nowhere")]) == 3
    assert main(["render", "--out", str(tmp_path / "x.png")]) == 2  # no checkpoint path configured
    (tmp_path / "bad.ckpt").write_bytes(b"garbage bytes")
    assert main(["render", "--checkpoint", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path / "x.png")]) == 4
    assert main(["slice", str(tmp_path), "--out", str(tmp_path / "s.png")]) == 3
    assert main(["render", "--config", str(workdir / "run.ini"), "--z-exp", "1,2",
                 "--out", str(tmp_path / "x.png")]) == 2
    capsys.readouterr()

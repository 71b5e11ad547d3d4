from fractions import Fraction

import numpy as np
import pytest
from PIL import Image

from ir2net import cli
from ir2net import train as T
from ir2net.config import TrainConfig
from ir2net.export import export_attention, read_image, to_gray8
from ir2net.models import build


@pytest.fixture
def checkpoint(tmp_path):
    cfg = TrainConfig(width_multiplier=Fraction(1, 4), output_dir=str(tmp_path / "run"))
    path = tmp_path / "model.ir2n"
    from ir2net import checkpoint as ckpt_io
    ckpt_io.save(T.make_checkpoint(cfg, build(cfg.backbone_spec()), None, 0), path)
    return path


@pytest.fixture
def image_dir(tmp_path):
    d = tmp_path / "imgs"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        Image.fromarray(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(d / f"img{i}.png")
    return d


def _read(path):
    with Image.open(path) as im:
        return np.asarray(im)


def test_lambda_zero_mask_is_white(checkpoint, image_dir, tmp_path):
    written = export_attention(checkpoint, image_dir, 0.0, tmp_path / "out")
    masks = [p for p in written if "_mask_" in p.name]
    assert len(masks) == 2 and all("lam0" in p.name for p in masks)
    for p in masks:
        assert (_read(p) == 255).all()


def test_masks_are_binary_and_names_encode_lambda(checkpoint, image_dir, tmp_path):
    written = export_attention(checkpoint, image_dir, 0.75, tmp_path / "out")
    names = {p.name for p in written}
    assert {"img0_attention.pgm", "img0_mask_lam0.75.pgm", "img0_masked_lam0.75.ppm"} <= names
    for p in written:
        if "_mask_" in p.name:
            assert set(np.unique(_read(p))) <= {0, 255}
            assert p.read_bytes()[:2] == b"P5"


def test_zero_map_is_black():
    assert (to_gray8(np.zeros((8, 8))) == 0).all()
    g = to_gray8(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert g.min() == 0 and g.max() == 255


def test_unreadable_image(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError):
        read_image(bad, 32)


def test_cli_flops(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("backbone = resnet20\nrecovery = cirec\nr = 4\n")
    assert cli.main(["flops", "--config", str(cfg), "--out", str(tmp_path / "rep")]) == 0
    assert "q_cirec 158720" in capsys.readouterr().out
    assert (tmp_path / "rep" / "complexity.csv").read_text().startswith("layer,kind,bops,flops")


def test_cli_train_eval_export(tmp_path, capsys, image_dir):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"width_multiplier = 1/4\ntrain_subset = 40\ntest_subset = 20\nbatch_size = 20\n"
                   f"ires = true\noutput_dir = {tmp_path / 'run'}\n")
    assert cli.main(["train", "--config", str(cfg)]) == 0
    ck = tmp_path / "run" / "final.ir2n"
    assert ck.exists()
    assert cli.main(["eval", "--ckpt", str(ck), "--data", "synthetic"]) == 0
    assert "accuracy" in capsys.readouterr().out
    assert cli.main(["export-attention", "--ckpt", str(ck), "--images", str(image_dir), "--lambda", "0.15",
                     "--out", str(tmp_path / "att")]) == 0
    assert len(list((tmp_path / "att").iterdir())) == 6


def test_cli_reports_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lr = nope\n")
    assert cli.main(["flops", "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err

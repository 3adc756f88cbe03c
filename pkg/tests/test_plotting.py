import numpy as np
from PIL import Image

from mpi_facedit.plotting import (
    contact_sheet,
    load_depth_png,
    load_png,
    loss_curves,
    save_depth_png,
    save_frames,
    save_png,
    to_uint8,
)


def test_to_uint8_rounds_and_clips():
    x = np.array([-0.5, 0.0, 0.5 / 255, 1.0, 2.0])
    assert to_uint8(x).tolist() == [0, 0, 1, 255, 255]
    u = np.array([3, 4], dtype=np.uint8)
    assert to_uint8(u) is u


def test_png_roundtrip_within_quantisation(tmp_path):
    x = np.random.default_rng(0).uniform(size=(8, 8, 3))
    save_png(tmp_path / "a" / "x.png", x)
    back = load_png(tmp_path / "a" / "x.png")
    assert back.shape == (8, 8, 3)
    assert np.abs(back - x).max() <= 0.5 / 255 + 1e-12


def test_depth_png_16bit_roundtrip(tmp_path):
    d = np.random.default_rng(1).uniform(1.0, 2.0, size=(8, 8))
    d[0, 0], d[0, 1] = 1.0, 2.0
    save_depth_png(tmp_path / "d.png", d, 1.0, 2.0)
    with Image.open(tmp_path / "d.png") as im:
        raw = np.asarray(im)
    assert raw.dtype in (np.uint16, np.int32) and raw[0, 0] == 0 and raw[0, 1] == 65535
    back = load_depth_png(tmp_path / "d.png", 1.0, 2.0)
    assert np.abs(back - d).max() <= 0.5 / 65535 + 1e-12


def test_figures_written(tmp_path):
    imgs = np.random.default_rng(2).uniform(size=(2, 3, 8, 8, 3))
    contact_sheet(imgs, tmp_path / "s.png", row_labels=["a", "b"], col_labels=["x", "y", "z"], title="t")
    contact_sheet(imgs[0], tmp_path / "one.png")
    with Image.open(tmp_path / "s.png") as im:
        assert abs(im.size[0] - 360) <= 1 and abs(im.size[1] - 240) <= 1
    paths = save_frames(imgs[0], tmp_path / "f")
    assert [p.name for p in paths] == ["frame_000.png", "frame_001.png", "frame_002.png"]
    recs = [{"step": i, "a": 1.0 / (i + 1), "b": float(i)} for i in range(120)]
    loss_curves(recs, ["a", "b"], tmp_path / "l.png", "losses")
    assert (tmp_path / "l.png").stat().st_size > 0 and (tmp_path / "one.png").is_file()

import numpy as np
import pytest

from mpi_facedit import oracles

SKIN = np.array([0.85, 0.65, 0.5])


def _face(size=32):
    img = np.zeros((size, size, 3))
    img[:] = SKIN
    return img


def test_glasses_dark_band():
    img = _face()
    assert not oracles.detect("glasses", img)
    img[14:18, 6:26] = 0.1
    assert oracles.glasses_score(img) == pytest.approx(1.0)
    assert oracles.detect("glasses", img)


def test_void_pixels_are_not_dark():
    img = _face()
    img[14:18, 6:26] = 0.0  # out-of-frame black
    assert oracles.glasses_score(img) == 0.0


def test_hat_band():
    img = _face()
    img[5:10, 4:28] = 0.15
    assert oracles.detect("hat", img)
    assert not oracles.detect("glasses", img)


def test_aged_desaturation():
    img = _face()
    assert not oracles.detect("aged", img)
    grey = img.mean(axis=-1, keepdims=True)
    assert oracles.detect("aged", np.repeat(grey, 3, axis=-1))


def _mouth(curve):
    img = _face()
    xs = np.arange(12, 21)
    for x in xs:
        u = (x - 16) / 4.0
        y = int(round(23 - curve * u * u))
        img[y, x] = 0.2
    return img


def test_smile_curvature_sign():
    assert oracles.smile_score(_mouth(2.0)) > oracles.THRESHOLDS["smile"]
    assert oracles.smile_score(_mouth(0.0)) < oracles.THRESHOLDS["smile"]
    assert oracles.smile_score(_mouth(-2.0)) < 0


def test_blank_image_scores_nothing():
    img = _face()
    for a in oracles.THRESHOLDS:
        if a != "aged":
            assert not oracles.detect(a, img)
    assert oracles.smile_score(img) == 0.0


def test_batch_matches_single():
    imgs = np.stack([_face(), _mouth(2.0)])
    assert list(oracles.detect_batch("smile", imgs)) == [oracles.detect("smile", i) for i in imgs]

import numpy as np
from PIL import Image

from segxray.imaging import export_png, render, resize_bilinear


def test_constant_gray_is_zero():
    assert np.all(render(np.full((3, 3), 7.0)) == 0)


def test_two_by_two_gray():
    px = render(np.array([[0.0, 1.0], [0.0, 1.0]]))
    assert px.tolist() == [[0, 255], [0, 255]]


def test_fixed_range():
    px = render(np.array([[0.0, 0.5]]), fixed_range=(0.0, 1.0))
    assert px.tolist() == [[0, 128]]


def test_png_bytes_identical(tmp_path):
    t = np.random.default_rng(0).random((9, 7))
    for pal in ("gray", "jet", "red-overlay"):
        a = export_png(t, pal, tmp_path / f"a_{pal}.png").read_bytes()
        b = export_png(t, pal, tmp_path / f"b_{pal}.png").read_bytes()
        assert a == b
    img = np.asarray(Image.open(tmp_path / "a_red-overlay.png"))
    assert img.shape == (9, 7, 3) and img[..., 1:].max() == 0


def test_bilinear_half_pixel():
    up = resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), (4, 4))
    assert up[0].tolist() == [0.0, 0.25, 0.75, 1.0]
    assert np.array_equal(resize_bilinear(np.eye(3), (3, 3)), np.eye(3))

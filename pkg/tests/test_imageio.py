import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from scl_lle.imageio import (
    ImageFormatError,
    brightness_map,
    gamma_darken,
    histogram,
    load_image,
    load_label,
    resize,
    resize_labels,
    save_image,
    to_uint8,
)

from conftest import const_image


def _write_rgb(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path)


@pytest.mark.parametrize("raw, expected", [(255, 1.0), (0, 0.0), (128, 128 / 255)])
def test_load_scales_8bit(tmp_path, raw, expected):
    p = tmp_path / "x.png"
    _write_rgb(p, np.full((4, 4, 3), raw))
    img = load_image(p)
    assert img.shape == (3, 4, 4) and img.dtype == torch.float32
    assert float((img.double() - expected).abs().max()) < 1e-7


def test_load_16bit_png(tmp_path):
    import cv2
    p = tmp_path / "x16.png"
    cv2.imwrite(str(p), np.full((4, 4, 3), 65535, dtype=np.uint16))
    assert float(load_image(p).min()) == 1.0


def test_grayscale_replicated(tmp_path):
    p = tmp_path / "g.png"
    Image.fromarray(np.full((4, 4), 51, dtype=np.uint8), mode="L").save(p)
    img = load_image(p)
    assert img.shape == (3, 4, 4)
    assert torch.equal(img[0], img[2])


def test_rejects_non_image(tmp_path):
    p = tmp_path / "bad.png"
    p.write_bytes(b"not an image")
    with pytest.raises(ImageFormatError):
        load_image(p)


@pytest.mark.parametrize("value, expected", [(0.0, 0.0), (1.0, 1.0), (0.5, 128 / 255)])
def test_save_load_values(tmp_path, value, expected):
    p = tmp_path / "s.png"
    save_image(const_image(value), p)
    assert abs(float(load_image(p)[0, 0, 0]) - expected) < 1e-7


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_roundtrip_within_half_step(tmp_path_factory, seed):
    img = torch.from_numpy(np.random.default_rng(seed).random((3, 5, 6)))
    p = tmp_path_factory.mktemp("rt") / "r.png"
    save_image(img, p)
    assert float((load_image(p).double() - img).abs().max()) <= 1 / 510 + 1e-7


def test_to_uint8_rounds_half_up():
    assert to_uint8(const_image(0.5))[0, 0, 0] == 128


def test_label_roundtrip(tmp_path):
    from scl_lle.imageio import save_label
    lab = np.array([[0, 1], [2, 255]])
    save_label(lab, tmp_path / "l.png")
    assert np.array_equal(load_label(tmp_path / "l.png"), lab)


def test_resize_identity_and_constant():
    img = torch.rand(3, 6, 5, dtype=torch.float64)
    assert torch.equal(resize(img, 6, 5), img)
    c = resize(const_image(0.37, 6, 5), 9, 4)
    assert c.shape == (3, 9, 4)
    assert torch.allclose(c, torch.full_like(c, 0.37), atol=1e-12)


def _bilinear_oracle(src, out_h, out_w):
    """Half-pixel-centre bilinear sampling with edge clamping."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y = min(max((i + 0.5) * h / out_h - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / out_w - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * src[y0, x0] + (1 - fy) * fx * src[y0, x1]
                         + fy * (1 - fx) * src[y1, x0] + fy * fx * src[y1, x1])
    return out


def test_resize_2x2_to_2x1_matches_oracle():
    src = np.array([[0.0, 1.0], [0.0, 1.0]])
    img = torch.from_numpy(np.stack([src] * 3))
    out = resize(img, 2, 1)
    assert np.allclose(out[0].numpy(), _bilinear_oracle(src, 2, 1), atol=1e-12)
    assert np.allclose(out[0].numpy(), 0.5)


def test_resize_random_matches_oracle(rng):
    src = rng.random((5, 7))
    out = resize(torch.from_numpy(np.stack([src] * 3)), 3, 4)[1].numpy()
    assert np.allclose(out, _bilinear_oracle(src, 3, 4), atol=1e-12)


def test_resize_rejects_nonpositive():
    with pytest.raises(ValueError):
        resize(const_image(0.5), 0, 3)


def test_resize_labels_subset(rng):
    lab = rng.integers(0, 5, (7, 9))
    out = resize_labels(lab, 4, 13)
    assert set(np.unique(out)) <= set(np.unique(lab))


def test_gamma_examples():
    img = const_image(0.25)
    assert torch.equal(gamma_darken(img, 1.0), img)
    assert torch.allclose(gamma_darken(img, 2.0), const_image(0.0625), atol=0)
    assert torch.equal(gamma_darken(const_image(1.0), 7.3), const_image(1.0))
    with pytest.raises(ValueError):
        gamma_darken(img, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(1, 10), st.floats(0, 5))
def test_gamma_monotone_in_gamma(x, g, dg):
    t = torch.tensor([x], dtype=torch.float64)
    assert float(gamma_darken(t, g + dg)) <= float(gamma_darken(t, g)) <= x


def test_brightness_map_examples():
    img = torch.tensor([1.0, 0.0, 0.3, 1.0, 0.0, 0.6, 1.0, 0.0, 0.9], dtype=torch.float64).reshape(3, 1, 3)
    assert torch.allclose(brightness_map(img), torch.tensor([[1.0, 0.0, 0.6]], dtype=torch.float64))
    with pytest.raises(ValueError):
        brightness_map(img, "hsv")


def test_histogram_examples():
    assert (histogram(const_image(0.0)).bins[:, 0] == 16).all()
    assert (histogram(const_image(1.0)).bins[:, 255] == 16).all()
    two = const_image(0.0)
    two[:, :2] = 1.0
    h = histogram(two)
    assert (h.bins[:, 0] == 8).all() and (h.bins[:, 255] == 8).all()
    assert h.mean_brightness == 0.5

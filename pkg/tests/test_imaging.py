import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emocue import imaging


@given(img=arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_pgm_roundtrip_binary_and_ascii(img):
    np.testing.assert_array_equal(imaging.decode_pgm(imaging.encode_pgm(img)), img)
    np.testing.assert_array_equal(imaging.decode_pgm(imaging.encode_pgm_ascii(img)), img)


def test_pgm_header_with_comments():
    data = b"P5\n# made by hand\n3 1\n# another\n255\n\x01\x02\x03"
    np.testing.assert_array_equal(imaging.decode_pgm(data), [[1, 2, 3]])


def test_pgm_lower_maxval_is_rescaled():
    data = b"P2\n2 1\n15\n0 15\n"
    np.testing.assert_array_equal(imaging.decode_pgm(data), [[0, 255]])


@pytest.mark.parametrize("data", [b"P6\n1 1\n255\n\0\0\0", b"P5\n2 2\n255\n\0", b"P5\n2", b"",
                                  b"P5\n2 2\n65535\n" + b"\0" * 8, b"P2\n2 1\n255\n1 300\n"])
def test_bad_pgm(data):
    with pytest.raises(imaging.ImageError):
        imaging.decode_pgm(data)


def test_read_missing_file(tmp_path):
    with pytest.raises(imaging.ImageError) as err:
        imaging.read_pgm(tmp_path / "nope.pgm")
    assert err.value.exit_code == 2


def test_ppm_roundtrip(rng):
    rgb = rng.integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    blob = imaging.encode_ppm(rgb)
    assert blob.startswith(b"P6\n7 5\n255\n") and len(blob) == 11 + 5 * 7 * 3
    np.testing.assert_array_equal(imaging.decode_ppm(blob), rgb)


def test_resize_identity_and_constant(rng):
    img = rng.integers(0, 256, size=(6, 9)).astype(np.float64)
    np.testing.assert_array_equal(imaging.resize_bilinear(img, 6, 9), img)
    np.testing.assert_allclose(imaging.resize_bilinear(np.full((5, 3), 7.0), 11, 13), 7.0)


def test_resize_halving_averages_blocks(rng):
    img = rng.integers(0, 256, size=(8, 8)).astype(np.float64)
    blocks = img.reshape(4, 2, 4, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(imaging.resize_bilinear(img, 4, 4), blocks, atol=1e-12)


def test_resize_gray_rounds_half_up():
    # 2 px -> 1 px averages the two samples: (10 + 11) / 2 = 10.5 -> 11
    assert imaging.resize_gray(np.array([[10, 11]], np.uint8), 1, 1)[0, 0] == 11


@given(x=st.integers(-30, 40), y=st.integers(-30, 40), w=st.integers(1, 40), h=st.integers(1, 40))
def test_crop_clamped_never_empty_and_inside(x, y, w, h):
    img = np.arange(20 * 25, dtype=np.int64).reshape(20, 25)
    crop = imaging.crop_clamped(img, x, y, w, h)
    assert crop.size >= 1
    assert crop.shape[0] <= 20 and crop.shape[1] <= 25

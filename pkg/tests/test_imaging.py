import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sada.imaging import (
    PpmError,
    RgbImage,
    decode_ppm,
    encode_ppm,
    from_optical_density,
    load_ppm,
    save_ppm,
    to_optical_density,
)

LN255 = float(mpmath.log(255))


def image_strategy(min_value=0):
    return st.tuples(st.integers(1, 9), st.integers(1, 9)).flatmap(
        lambda hw: arrays(np.uint8, (hw[0], hw[1], 3),
                          elements=st.integers(min_value, 255)))


def test_white_pixel_has_zero_density():
    od = to_optical_density(RgbImage(np.full((1, 1, 3), 255, np.uint8)))
    assert od.shape == (3, 1)
    assert np.all(od == 0)


def test_black_pixel_clamps_to_log_255():
    od = to_optical_density(RgbImage(np.zeros((1, 1, 3), np.uint8)))
    np.testing.assert_allclose(od[:, 0], [LN255] * 3, rtol=0, atol=1e-15)
    assert abs(LN255 - 5.5413) < 1e-4


def test_inverse_examples():
    img = from_optical_density(np.zeros((3, 1)), 1, 1)
    assert img.pixels.tolist() == [[[255, 255, 255]]]
    # 255 / 2 = 127.5 rounds half away from zero
    img = from_optical_density(np.full((3, 1), np.log(2.0)), 1, 1)
    assert img.pixels[0, 0].tolist() == [128, 128, 128]
    img = from_optical_density(np.full((3, 1), 100.0), 1, 1)
    assert img.pixels[0, 0].tolist() == [0, 0, 0]


def test_od_layout_is_row_major_columns():
    px = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) + 1
    od = to_optical_density(RgbImage(px))
    # column p is pixel p in row-major order
    np.testing.assert_allclose(od[:, 4], -np.log(px[1, 1] / 255.0))


def test_from_od_rejects_bad_shape():
    with pytest.raises(ValueError):
        from_optical_density(np.zeros((3, 5)), 2, 2)


def test_rgb_image_validation():
    with pytest.raises(ValueError):
        RgbImage(np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        RgbImage(np.full((1, 1, 3), 300))
    with pytest.raises(ValueError):
        RgbImage(np.zeros((0, 2, 3), np.uint8))
    img = RgbImage(np.zeros((2, 3, 3), np.int64))
    assert img.pixels.dtype == np.uint8
    assert (img.width, img.height) == (3, 2)
    assert img.data.size == 3 * img.width * img.height
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1


def test_from_flat_round_trip():
    img = RgbImage.from_flat(2, 1, [1, 2, 3, 4, 5, 6])
    assert img.pixels[0, 1].tolist() == [4, 5, 6]
    with pytest.raises(ValueError):
        RgbImage.from_flat(2, 2, [1, 2, 3])


@given(image_strategy(min_value=1))
def test_round_trip_exact_for_nonzero_channels(px):
    img = RgbImage(px)
    back = from_optical_density(to_optical_density(img), img.width, img.height)
    assert back == img


@given(image_strategy())
def test_od_bounded_and_finite(px):
    od = to_optical_density(RgbImage(px))
    assert np.all(np.isfinite(od))
    assert np.all(od >= 0)
    assert np.all(od <= LN255 + 1e-12)


def test_od_strictly_decreasing_in_intensity():
    px = np.arange(1, 256, dtype=np.uint8).reshape(1, -1, 1).repeat(3, axis=2)
    od = to_optical_density(RgbImage(px))
    assert np.all(np.diff(od[0]) < 0)


def test_ppm_white_pixel_round_trip(tmp_path):
    img = RgbImage(np.full((1, 1, 3), 255, np.uint8))
    data = encode_ppm(img)
    assert data.startswith(b"P6")
    assert 10 <= len(data) <= 20
    path = tmp_path / "white.ppm"
    save_ppm(img, path)
    assert load_ppm(path) == img


@given(image_strategy())
def test_ppm_round_trip(px):
    img = RgbImage(px)
    assert decode_ppm(encode_ppm(img)) == img


def test_ppm_header_comments():
    data = b"P6\n# made by hand\n2 1 # size\n255\n" + bytes(range(6))
    img = decode_ppm(data)
    assert img.pixels.reshape(-1).tolist() == list(range(6))


def test_ppm_errors_are_distinct():
    with pytest.raises(PpmError, match="unsupported maxval") as e1:
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(PpmError, match="truncated data") as e2:
        decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(PpmError) as e3:
        decode_ppm(b"P3\n1 1\n255\n0 0 0")
    kinds = {e1.value.kind, e2.value.kind, e3.value.kind}
    assert kinds == {"maxval", "truncated", "malformed"}


def test_ppm_malformed_header_variants():
    for blob in (b"", b"P6\n", b"P6\nx 1\n255\n", b"P6\n0 1\n255\n"):
        with pytest.raises(PpmError):
            decode_ppm(blob)

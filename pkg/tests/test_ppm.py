import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from avatarfield.ppm import PpmError, decode_ppm, encode_ppm, quantize, read_ppm, write_ppm


def test_golden_bytes():
    img = np.array([[[0.0, 0.5, 1.0], [0.2, 1.7, -3.0]]])
    assert encode_ppm(img) == b"P6\n2 1\n255\n" + bytes([0, 128, 255, 51, 255, 0])


def test_rounding_is_half_up():
    assert quantize(np.array([0.5 / 255, 1.5 / 255, 254.5 / 255])).tolist() == [1, 2, 255]


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3))))
def test_byte_images_round_trip(raw):
    img = raw / 255.0
    assert np.array_equal(quantize(decode_ppm(encode_ppm(img))), raw)


def test_header_comments_are_skipped():
    data = b"P6\n# made by hand\n1 1\n# max\n255\n" + bytes([1, 2, 3])
    assert np.array_equal(quantize(decode_ppm(data))[0, 0], [1, 2, 3])


def test_errors_name_offsets():
    with pytest.raises(PpmError, match="byte offset"):
        decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(PpmError, match="magic"):
        decode_ppm(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(PpmError, match="maxval"):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(PpmError):
        encode_ppm(np.zeros((2, 2)))
    with pytest.raises(PpmError):
        encode_ppm(np.full((1, 1, 3), np.nan))


def test_file_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(0, 1, (3, 4, 3))
    write_ppm(img, tmp_path / "x.ppm")
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), quantize(img) / 255.0)

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from avatarfield.tensorio import (TensorFormatError, decode_tensors, encode_tensors, load_checkpoint,
                                  save_checkpoint)


def test_golden_bytes_single_tensor():
    blob = encode_tensors({"a": np.array([1.0, -2.0])})
    expected = (b"GPAV" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"a" + struct.pack("<B", 1)
                + struct.pack("<Q", 2) + struct.pack("<2d", 1.0, -2.0))
    assert blob == expected


def test_scalar_tensor_has_rank_zero():
    out = decode_tensors(encode_tensors({"s": np.array(3.5)}))
    assert out["s"].shape == () and out["s"] == 3.5


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=4)), max_size=4))
def test_round_trip_is_bit_exact(tensors):
    out = decode_tensors(encode_tensors(tensors))
    assert list(out) == list(tensors)
    for k, v in tensors.items():
        assert out[k].shape == v.shape
        assert out[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()


def test_truncation_names_byte_offset():
    blob = encode_tensors({"w": np.arange(4.0)})
    with pytest.raises(TensorFormatError, match="byte offset"):
        decode_tensors(blob[:-3])


def test_bad_magic_and_trailing_bytes():
    blob = encode_tensors({"w": np.zeros(1)})
    with pytest.raises(TensorFormatError, match="magic"):
        decode_tensors(b"XXXX" + blob[4:])
    with pytest.raises(TensorFormatError, match="trailing"):
        decode_tensors(blob + b"\0")


def test_checkpoint_file_round_trip(tmp_path):
    t = {"a.weight": np.random.default_rng(0).normal(size=(3, 2)), "b": np.zeros(0)}
    save_checkpoint(tmp_path / "c.gpav", t)
    back = load_checkpoint(tmp_path / "c.gpav")
    assert all(np.array_equal(back[k], t[k]) for k in t)
    assert not list(tmp_path.glob(".*.tmp"))

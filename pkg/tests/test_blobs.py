import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from afforddex.blobs import BlobError, decode_blob, encode_blob, read_blob, write_blob

f32s = st.floats(width=32, allow_nan=False)


@given(st.one_of(arrays(np.float32, st.integers(0, 20), elements=f32s), arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 5)), elements=f32s)))
def test_round_trip_is_exact(a):
    back = decode_blob(encode_blob(a))
    assert back.shape == a.shape
    assert np.array_equal(back, a)


def test_header_layout():
    data = encode_blob(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert data[:4] == b"AFB1"
    assert len(data) == 16 + 4 * 6


@pytest.mark.parametrize("mutate", [lambda d: d[:-1], lambda d: b"XXXX" + d[4:], lambda d: d[:8]])
def test_malformed_blobs_are_rejected(mutate):
    with pytest.raises(BlobError):
        decode_blob(mutate(encode_blob(np.ones(4))))


def test_three_dimensional_arrays_are_refused():
    with pytest.raises(BlobError):
        encode_blob(np.zeros((2, 2, 2)))


def test_file_helpers(tmp_path):
    digest = write_blob(tmp_path / "a.bin", np.ones(3))
    assert len(digest) == 64
    assert np.array_equal(read_blob(tmp_path / "a.bin"), np.ones(3, np.float32))

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flatland.checkpoint import CheckpointError, dumps, load, loads, save

shapes = st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple)
tensors = st.dictionaries(
    st.text(alphabet="abcdefghij._0123456789", min_size=1, max_size=20),
    shapes.flatmap(lambda s: arrays(np.float32, s, elements=st.floats(-1e6, 1e6, width=32))),
    max_size=5)


@settings(max_examples=60, deadline=None)
@given(t=tensors)
def test_round_trip_bit_exact(t):
    got, header = loads(dumps(t, {"spec": {"a": 1}}))
    assert header == {"spec": {"a": 1}}
    assert list(got) == list(t)
    for k in t:
        assert got[k].shape == t[k].shape
        assert got[k].tobytes() == np.ascontiguousarray(t[k]).tobytes()


def test_layout():
    blob = dumps({"w": np.array([1.0, 2.0], np.float32)}, {})
    assert blob[:4] == b"FLND" and blob[4] == 1
    (hlen,) = struct.unpack_from("<I", blob, 5)
    off = 9 + hlen
    assert struct.unpack_from("<I", blob, off) == (1,)
    assert blob[-8:] == np.array([1.0, 2.0], "<f4").tobytes()


def test_file_round_trip(tmp_path):
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save(tmp_path / "x.ckpt", t, {"k": "v"})
    got, header = load(tmp_path / "x.ckpt")
    np.testing.assert_array_equal(got["a"], t["a"])


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x02" + b[5:],
    lambda b: b[:-2],
    lambda b: b + b"\x00",
])
def test_corrupt_rejected(mutate):
    blob = dumps({"a": np.ones(3, np.float32)}, {})
    with pytest.raises(CheckpointError):
        loads(mutate(blob))

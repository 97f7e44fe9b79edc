import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockoffload import _kernels_py, kernels

entries = st.lists(st.tuples(st.binary(min_size=1, max_size=40), st.integers(0, 2**56),
                             st.integers(0, 1), st.binary(max_size=200)), max_size=30)


def encode(items):
    out = bytearray()
    for key, seq, op, value in items:
        out += struct.pack("<H", len(key)) + key + struct.pack("<QBI", seq, op, len(value)) + value
    return bytes(out)


@settings(max_examples=100, deadline=None)
@given(entries, st.binary(max_size=8))
def test_decode_matches_python_and_roundtrips(items, prefix):
    buf = prefix + encode(items)
    got = kernels.decode_entries(buf, len(prefix), len(buf))
    assert got == _kernels_py.decode_entries(buf, len(prefix), len(buf))
    assert got == [tuple(i) for i in items]


@pytest.mark.parametrize("cut", [1, 5, 16])
def test_truncated_entries_raise_in_both_backends(cut):
    buf = encode([(b"key", 1, 0, b"value")])
    for impl in (kernels, _kernels_py):
        with pytest.raises(ValueError):
            impl.decode_entries(buf, 0, len(buf) - cut)
    with pytest.raises(ValueError):
        kernels.decode_entries(buf, 0, len(buf) + 1)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")

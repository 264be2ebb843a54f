import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bpfpn_lab.errors import ContractError, FormatError, ParameterError, SizeError
from bpfpn_lab.tensor import (
    MAGIC, Rng, check_shape, load_container, offset, randn, save_container, zeros,
)

dims = st.integers(1, 5)
shapes = st.tuples(dims, dims, dims, dims)


def test_zeros_small():
    z = zeros((1, 1, 2, 2))
    assert z.shape == (1, 1, 2, 2)
    assert not z.any()


def test_zeros_count():
    assert zeros((2, 3, 4, 4)).size == 96


@pytest.mark.parametrize("shape", [(1, 1, 0, 2), (1, 2, 3), (-1, 1, 1, 1), (2**32, 2**32, 2, 1)])
def test_bad_shapes(shape):
    with pytest.raises(SizeError):
        check_shape(shape)


@given(shapes, st.data())
def test_offset_is_row_major(shape, data):
    n, c, h, w = (data.draw(st.integers(0, d - 1)) for d in shape)
    ref = np.arange(np.prod(shape)).reshape(shape)
    assert offset(shape, n, c, h, w) == ref[n, c, h, w]


def test_offset_rejects_out_of_range():
    with pytest.raises(SizeError):
        offset((1, 1, 2, 2), 0, 0, 2, 0)


def test_randn_deterministic():
    a = randn((2, 3, 4, 4), Rng(42))
    b = randn((2, 3, 4, 4), Rng(42))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, randn((2, 3, 4, 4), Rng(43)))


def test_randn_mean_within_lln_bound():
    x = randn((1, 1, 100, 100), Rng(0), std=0.1)
    assert abs(x.mean()) < 5 * 0.1 / 100


def test_randn_rejects_nonpositive_std():
    with pytest.raises(ParameterError):
        randn((1, 1, 1, 1), Rng(0), std=-1)


def test_uniform_range_and_spawn_independence():
    r = Rng(7)
    u = r.uniform(10_000)
    assert u.min() >= 0 and u.max() < 1
    assert not np.array_equal(Rng(7).spawn("a").raw(4), Rng(7).spawn("b").raw(4))
    assert np.array_equal(Rng(7).spawn("a").raw(4), Rng(7).spawn("a").raw(4))


def test_integers_bounds():
    v = Rng(3).integers(4, 60, 5000)
    assert v.min() >= 4 and v.max() < 60


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, shapes, elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_container_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("c") / "t.gft"
    save_container(arr, path)
    back = load_container(path)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_container_wrong_magic(tmp_path):
    path = tmp_path / "x.gft"
    save_container(np.ones((1, 1, 2, 2)), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_container(path)


def test_container_short_payload(tmp_path):
    path = tmp_path / "x.gft"
    path.write_bytes(struct.pack("<4s4Q", MAGIC, 1, 1, 4, 4) + np.zeros(12).tobytes())
    with pytest.raises(FormatError):
        load_container(path)


def test_container_truncated_header(tmp_path):
    path = tmp_path / "x.gft"
    path.write_bytes(MAGIC + b"\x01")
    with pytest.raises(FormatError):
        load_container(path)


def test_container_rejects_nonfinite(tmp_path):
    with pytest.raises(ContractError):
        save_container(np.full((1, 1, 1, 1), np.inf), tmp_path / "x.gft")

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from patchmix.core import (ArgumentError, BadMagicError, DegenerateInputError, MissingFileError,
                           NumericalError, Rng, ShapeMismatchError, as_f32, cosine, decode_tensor,
                           encode_tensor, load_tensor, save_tensor, softmax, uniform)

GOLDEN_SEED7_FIRST = 0.625095466604667

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_uniform_golden_first_draw():
    assert uniform(Rng(7), 0.0, 1.0) == GOLDEN_SEED7_FIRST


def test_uniform_two_draws_distinct_in_range():
    r = Rng(3)
    a, b = uniform(r, 0, 1), uniform(r, 0, 1)
    assert a != b and 0 <= a < 1 and 0 <= b < 1


def test_uniform_degenerate_range():
    r = Rng(3)
    for _ in range(100):
        x = uniform(r, 5, 5.0000001)
        assert 5 <= x < 5.0000001


@pytest.mark.parametrize("lo,hi", [(1, 1), (2, 1)])
def test_uniform_rejects_empty_range(lo, hi):
    with pytest.raises(ArgumentError):
        uniform(Rng(0), lo, hi)


def test_rng_replay_and_split():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(10), b.normal(10))
    ca, cb = Rng(9).split(3), Rng(9).split(3)
    assert [c.seed for c in ca] == [c.seed for c in cb]
    assert len({c.seed for c in ca}) == 3
    # the i-th child does not depend on how many were requested at once
    r = Rng(9)
    assert [c.seed for c in r.split(1) + r.split(2)] == [c.seed for c in ca]


def test_cosine_examples():
    v = np.array([0.3, -2.0, 1.0])
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine(v, -v) == pytest.approx(-1.0)
    assert cosine([1, 0], [0, 1]) == 0.0
    with pytest.raises(DegenerateInputError):
        cosine([0, 0], [1, 0])


@given(hnp.arrays(np.float64, 4, elements=finite), hnp.arrays(np.float64, 4, elements=finite),
       st.floats(0.1, 10), st.floats(0.1, 10), st.booleans())
def test_cosine_scaling(a, b, alpha, beta, flip):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    s = -1.0 if flip else 1.0
    assert cosine(s * alpha * a, beta * b) == pytest.approx(s * cosine(a, b), abs=1e-9)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([2.0, 2.0, 2.0]), [1 / 3] * 3)
    np.testing.assert_allclose(softmax([0.0, math.log(3)]), [0.25, 0.75])
    assert softmax([3.0, 1.0], temperature=1e-3)[0] == pytest.approx(1.0)
    for t in (0.0, -1.0):
        with pytest.raises(ArgumentError):
            softmax([1.0], temperature=t)


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite), finite, st.floats(0.05, 20))
def test_softmax_normalised_and_shift_invariant(x, c, t):
    p = softmax(x, t)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-6
    np.testing.assert_allclose(softmax(x + c, t), p, atol=1e-9)


@settings(max_examples=50)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_pmx_round_trip(x):
    buf = encode_tensor(x)
    y, end = decode_tensor(buf)
    assert end == len(buf) and y.shape == x.shape
    assert y.tobytes() == x.tobytes()


def test_pmx_layout_is_little_endian():
    buf = encode_tensor(np.array([[1.0, 2.0]], np.float32))
    assert buf[:4] == b"PMX1"
    assert struct.unpack("<I2I", buf[4:16]) == (2, 1, 2)
    assert buf[16:] == struct.pack("<2f", 1.0, 2.0)


def test_pmx_errors(tmp_path):
    with pytest.raises(MissingFileError):
        load_tensor(tmp_path / "none.pmx")
    p = tmp_path / "bad.pmx"
    p.write_bytes(b"PMX2" + bytes(8))
    with pytest.raises(BadMagicError):
        load_tensor(p)
    good = encode_tensor(np.zeros((2, 3), np.float32))
    p.write_bytes(good[:-4])
    with pytest.raises(ShapeMismatchError):
        load_tensor(p)
    p.write_bytes(good + b"\0")
    with pytest.raises(ShapeMismatchError):
        load_tensor(p)
    save_tensor(p, np.ones(3))
    assert load_tensor(p).dtype == np.float32


def test_non_finite_is_an_error():
    with pytest.raises(NumericalError):
        as_f32([1.0, np.nan])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmloss.errors import ShapeError
from mmloss.numeric import (
    l2_normalize_rows,
    make_rng,
    pairwise_sq_dist,
    rng_from_state,
    rng_state,
    stable_softmax,
)


def test_pairwise_345_triangle():
    a = [[0.0, 0.0], [3.0, 4.0]]
    assert pairwise_sq_dist(a, a).tolist() == [[0.0, 25.0], [25.0, 0.0]]


def test_pairwise_identity():
    assert pairwise_sq_dist([[1.0]], [[1.0]]).tolist() == [[0.0]]


def test_pairwise_matches_loop_oracle(rng):
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(5, 3))
    expected = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            s = 0.0
            for k in range(3):
                s += (a[i, k] - b[j, k]) ** 2
            expected[i, j] = s
    assert np.array_equal(pairwise_sq_dist(a, b), expected)


def test_pairwise_dimension_mismatch():
    with pytest.raises(ShapeError):
        pairwise_sq_dist(np.zeros((2, 3)), np.zeros((2, 4)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3)))
def test_pairwise_self_symmetric_zero_diagonal(a):
    d = pairwise_sq_dist(a, a)
    assert np.all(np.diag(d) == 0.0)
    assert np.array_equal(d, d.T)
    assert np.all(d >= 0)


def test_softmax_symmetric():
    assert stable_softmax([0.0, 0.0]).tolist() == [0.5, 0.5]


def test_softmax_large_logits_no_overflow():
    assert stable_softmax([1000.0, 1000.0]).tolist() == [0.5, 0.5]


def test_softmax_matches_high_precision_reference():
    from mpmath import mp, mpf, exp

    mp.dps = 50
    logits = [1.0, 2.0, 3.0]
    denom = sum(exp(mpf(v) - 3) for v in logits)
    expected = [float(exp(mpf(v) - 3) / denom) for v in logits]
    np.testing.assert_allclose(stable_softmax(logits), expected, rtol=1e-15, atol=0)


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        stable_softmax([0.0, math.nan])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)))
def test_softmax_is_a_distribution(z):
    p = stable_softmax(z)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)
    if np.ptp(z) < 30:
        assert np.all(p > 0) and np.all(p < 1) or z.size == 1


def test_normalize_rows():
    np.testing.assert_allclose(l2_normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]], rtol=0, atol=1e-15)
    assert l2_normalize_rows([[1.0, 0.0]]).tolist() == [[1.0, 0.0]]


def test_normalize_zero_row_names_index():
    with pytest.raises(ValueError, match="row 1"):
        l2_normalize_rows([[1.0, 0.0], [0.0, 0.0]])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(0.01, 100)))
def test_normalized_rows_have_unit_norm(m):
    out = l2_normalize_rows(m)
    assert np.all(np.abs(np.linalg.norm(out, axis=1) - 1.0) <= 1e-12)


def test_rng_streams_deterministic_and_independent():
    a = make_rng(7, "data").random(5)
    b = make_rng(7, "data").random(5)
    c = make_rng(7, "init").random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_state_roundtrip():
    r = make_rng(3, "sampling")
    r.random(10)
    state = rng_state(r)
    expected = r.random(4)
    assert np.array_equal(rng_from_state(state).random(4), expected)


def test_unknown_stream_rejected():
    with pytest.raises(ValueError):
        make_rng(1, "bogus")

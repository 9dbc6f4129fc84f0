import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from toim.core import euclidean_distance, logistic, pairwise_distances, stable_softplus

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


@pytest.mark.parametrize("a, b, expected", [
    ((0, 0), (0, 0), 0.0),
    ((0, 0), (3, 4), 5.0),
    ((1, 2, 3), (4, 6, 3), 5.0),
])
def test_euclidean_examples(a, b, expected):
    assert euclidean_distance(a, b) == expected


def test_euclidean_dimension_mismatch():
    with pytest.raises(ValueError):
        euclidean_distance([0, 0], [0, 0, 0])


def test_euclidean_rejects_nan():
    with pytest.raises(ValueError):
        euclidean_distance([np.nan, 0], [0, 0])


@given(vec3, vec3, vec3)
def test_triangle_inequality_and_symmetry(a, b, c):
    assert euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-9
    assert euclidean_distance(a, b) == euclidean_distance(b, a)


def test_pairwise_small_example():
    np.testing.assert_array_equal(pairwise_distances([(0, 0)], [(0, 0), (3, 4)]), [[0, 5]])


def test_pairwise_symmetric_zero_diagonal():
    x = np.random.default_rng(0).normal(size=(3, 4))
    d = pairwise_distances(x, x)
    np.testing.assert_array_equal(d, d.T)
    np.testing.assert_array_equal(np.diag(d), 0.0)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 40), st.integers(0, 2**31))
def test_pairwise_matches_double_loop_exactly(nq, nr, dim, seed):
    rng = np.random.default_rng(seed)
    q, r = rng.normal(size=(nq, dim)), rng.normal(size=(nr, dim))
    d = pairwise_distances(q, r)
    for i in range(nq):
        for j in range(nr):
            assert d[i, j] == euclidean_distance(q[i], r[j])


def test_pairwise_errors():
    with pytest.raises(ValueError):
        pairwise_distances([], [(0, 0)])
    with pytest.raises(ValueError):
        pairwise_distances([(0, 0)], [(0, 0, 0)])


def test_softplus_examples():
    assert stable_softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert stable_softplus(1000.0) == pytest.approx(1000.0, rel=1e-12)
    # mpmath, 50 digits: ln(1 + e^-10)
    assert stable_softplus(-10.0) == pytest.approx(4.5398899216864646769e-05, rel=1e-14)


def test_softplus_extremes_do_not_overflow():
    assert stable_softplus(1e8) == 1e8
    assert stable_softplus(-1e8) == 0.0


@given(st.floats(-1e8, 1e8), st.floats(-1e8, 1e8))
def test_softplus_bounds_and_monotone(x, y):
    assert stable_softplus(x) >= max(x, 0.0)
    if x <= y:
        assert stable_softplus(x) <= stable_softplus(y)


def test_logistic_saturates_without_warnings():
    with np.errstate(over="raise", invalid="raise"):
        assert logistic(-1000.0) == 0.0
        assert logistic(1000.0) == 1.0
    assert logistic(0.0) == 0.5

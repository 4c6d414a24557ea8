import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedselect.numkit import RngStream, ShapeError, affine, finite_diff_grad, rng_draw, softmax


def test_affine_identity():
    np.testing.assert_array_equal(affine([[1, 0], [0, 1]], [3, 4], [0, 0]), [3, 4])


def test_affine_scalar():
    np.testing.assert_array_equal(affine([[2]], [3], [1]), [7])


def test_affine_hand_multiply():
    np.testing.assert_array_equal(affine([[1, 2], [3, 4]], [1, 1], [1, 0]), [4, 7])


@pytest.mark.parametrize(
    "W, x, b",
    [([[1, 2]], [1], [0]), ([[1, 2]], [1, 2], [0, 0]), ([1, 2], [1, 2], [0])],
)
def test_affine_shape_errors(W, x, b):
    with pytest.raises(ShapeError):
        affine(W, x, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(-5, 5))
def test_affine_is_linear(seed, a, c):
    r = RngStream(seed, "linearity")
    W = r.gaussian(12).reshape(3, 4)
    x, y = r.gaussian(4), r.gaussian(4)
    zero = np.zeros(3)
    lhs = affine(W, a * x + c * y, zero)
    rhs = a * affine(W, x, zero) + c * affine(W, y, zero)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10, rtol=0)


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)
    big = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)
    np.testing.assert_allclose(softmax([math.log(1), math.log(3)]), [0.25, 0.75], atol=1e-15)


def test_softmax_empty():
    with pytest.raises(ShapeError):
        softmax([])


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-100, 100),
)
def test_softmax_sums_to_one_and_shift_invariant(z, shift):
    p = softmax(z)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(softmax(np.array(z) + shift), p, atol=1e-12, rtol=0)


def test_rng_same_key_same_sequence():
    a = RngStream(42, "partition")
    b = RngStream(42, "partition")
    for kind in ("uniform", "gaussian", "shuffle"):
        np.testing.assert_array_equal(rng_draw(a, kind, 100), rng_draw(b, kind, 100))


def test_rng_sequence_is_frozen():
    # guards against silent changes to the keying or the transforms
    assert RngStream(7, "frozen").shuffle(6).tolist() == [4, 3, 5, 0, 2, 1]
    assert RngStream(0, "frozen").raw(2).tolist() == [6739192808227060116, 3185419987464316185]
    assert RngStream(0, "frozen").uniform(3).tolist() == [0.3653323741739233, 0.17268196353437792, 0.601722226563564]


def test_rng_labels_are_independent():
    u = RngStream(1, "a").uniform(20000)
    v = RngStream(1, "b").uniform(20000)
    table = np.histogram2d(u, v, bins=8, range=[[0, 1], [0, 1]])[0]
    _, p, _, _ = stats.chi2_contingency(table)
    assert p > 1e-3
    assert not np.array_equal(u, v)


def test_rng_uniform_and_gaussian_marginals():
    r = RngStream(3, "marginals")
    assert stats.kstest(r.uniform(20000), "uniform").pvalue > 1e-3
    assert stats.kstest(r.gaussian(20000), "norm").pvalue > 1e-3


@pytest.mark.parametrize("n", [0, 1, 3, 50])
def test_shuffle_is_permutation(n):
    perm = RngStream(9, "shuffle").shuffle(n)
    assert sorted(perm.tolist()) == list(range(n))


def test_integers_in_range():
    ints = RngStream(5, "ints").integers(1000, 7)
    assert ints.min() >= 0 and ints.max() <= 6
    assert set(ints.tolist()) == set(range(7))


def test_finite_diff_examples():
    assert finite_diff_grad(lambda t: t[0] ** 2, 3.0, 1e-5)[0] == pytest.approx(6.0, abs=1e-8)
    np.testing.assert_array_equal(finite_diff_grad(lambda t: 4.0, np.array([1.0, 2.0])), [0.0, 0.0])
    g = finite_diff_grad(lambda t: t[0] * t[1], np.array([2.0, 5.0]))
    np.testing.assert_allclose(g, [5.0, 2.0], atol=1e-8)


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: 0.0, [1.0], 0.0)

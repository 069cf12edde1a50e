import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sliceloop.errors import IndefiniteInput, NegativeSigma, NotSquare, NotSymmetric, TooFewSamples
from sliceloop.numerics import RngStream, gaussian_draw, mean_cov, sqrtm_psd, sym_eig


def test_eig_identity():
    w, v = sym_eig(np.eye(3))
    np.testing.assert_allclose(w, [1, 1, 1])
    np.testing.assert_allclose(v @ v.T, np.eye(3), atol=1e-12)


def test_eig_diagonal_axis_aligned():
    w, v = sym_eig(np.diag([1.0, 4.0]))
    np.testing.assert_allclose(w, [4, 1])
    np.testing.assert_allclose(np.abs(v), [[0, 1], [1, 0]], atol=1e-12)


def test_eig_two_by_two():
    # characteristic polynomial (2 - l)^2 - 1 = 0
    w, _ = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [3, 1], rtol=1e-12)


def test_eig_errors():
    with pytest.raises(NotSquare):
        sym_eig(np.ones((2, 3)))
    with pytest.raises(NotSymmetric):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def _sym(a):
    return 0.5 * (a + a.T)


symmetric = st.integers(1, 8).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(-100, 100))).map(_sym)


@settings(max_examples=100, deadline=None)
@given(symmetric)
def test_eig_matches_reference(m):
    w, v = sym_eig(m)
    scale = max(np.abs(m).max() * m.shape[0], 1e-300)  # norm() would underflow on tiny entries
    assert np.all(np.diff(w) <= 1e-12 * scale)
    np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(m))[::-1], atol=1e-9 * scale)
    recon = v @ np.diag(w) @ v.T
    assert np.linalg.norm(recon - m) <= 1e-9 * scale + 1e-300
    assert abs(w.sum() - np.trace(m)) <= 1e-9 * scale


def test_eig_extreme_magnitudes():
    for k in (1e-235, 1e200):
        w, _ = sym_eig(np.array([[1.0, 1.0], [1.0, 1.0]]) * k)
        np.testing.assert_allclose(w, [2 * k, 0.0], rtol=1e-12, atol=1e-12 * k)


def test_sqrtm_diagonal_and_identity():
    np.testing.assert_allclose(sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)
    np.testing.assert_allclose(sqrtm_psd(np.eye(4)), np.eye(4), atol=1e-12)


def test_sqrtm_squares_back():
    m = np.array([[2.0, 1.0], [1.0, 2.0]])
    r = sqrtm_psd(m)
    np.testing.assert_allclose(r, r.T)
    assert np.linalg.norm(r @ r - m) / np.linalg.norm(m) < 1e-8


def test_sqrtm_indefinite():
    with pytest.raises(IndefiniteInput):
        sqrtm_psd(np.diag([1.0, -1e-3]))
    # tiny negative round-off is clamped
    r = sqrtm_psd(np.diag([1.0, -1e-12]))
    assert r[1, 1] == 0.0


psd = st.integers(1, 6).flatmap(
    lambda n: arrays(np.float64, (n + 2, n), elements=st.floats(-10, 10))).map(lambda a: a.T @ a)


@settings(max_examples=100, deadline=None)
@given(psd)
def test_sqrtm_trace_property(m):
    r = sqrtm_psd(m)
    tr = np.trace(m)
    assert abs(np.trace(r @ r) - tr) <= 1e-8 * max(tr, 1e-12)
    assert np.linalg.norm(r @ r - m) <= 1e-8 * max(np.linalg.norm(m), 1e-12)


def test_mean_cov_examples():
    mu, s = mean_cov([[0, 0], [2, 2]])
    np.testing.assert_allclose(mu, [1, 1])
    np.testing.assert_allclose(s, [[2, 2], [2, 2]])
    mu, s = mean_cov([[0], [1], [2]])
    np.testing.assert_allclose(mu, [1])
    np.testing.assert_allclose(s, [[1]])
    _, s = mean_cov(np.tile([3.0, -1.0], (5, 1)))
    np.testing.assert_array_equal(s, np.zeros((2, 2)))
    with pytest.raises(TooFewSamples):
        mean_cov([[1.0, 2.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3)))
def test_mean_cov_matches_numpy(x):
    mu, s = mean_cov(x)
    np.testing.assert_allclose(mu, x.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(s, np.atleast_2d(np.cov(x, rowvar=False)), atol=1e-6)


def test_gaussian_draw():
    np.testing.assert_array_equal(gaussian_draw(RngStream(1), 5.0, 0.0, 3), [5, 5, 5])
    z = gaussian_draw(RngStream(2), 0.0, 1.0, 10_000)
    assert abs(z.mean()) < 0.04
    assert 0.95 <= z.std() <= 1.05
    np.testing.assert_array_equal(gaussian_draw(RngStream(3, 7), 0, 1, 50),
                                  gaussian_draw(RngStream(3, 7), 0, 1, 50))
    with pytest.raises(NegativeSigma):
        gaussian_draw(RngStream(1), 0.0, -1.0, 3)


def test_streams_independent_of_draw_order():
    a = RngStream(9)
    first = a.child("x", 1).gen.random(5)
    a.gen.random(100)
    a.child("y").gen.random(10)
    np.testing.assert_array_equal(a.child("x", 1).gen.random(5), first)
    assert not np.array_equal(RngStream(9, 1).gen.random(5), RngStream(9, 2).gen.random(5))


def test_streams_uncorrelated():
    a = RngStream(4, 1).gen.standard_normal(20_000)
    b = RngStream(4, 2).gen.standard_normal(20_000)
    # |r| < 4 / sqrt(n)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(a.size)

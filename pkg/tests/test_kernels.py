"""The numba kernels and their numpy twins must agree exactly."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bdfoa import _kernels as K

NB, NP = K.numba_impl, K.numpy_impl

finite_or_nan = st.one_of(st.floats(-5, 5, allow_nan=False), st.just(np.nan))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(float, st.tuples(st.integers(1, 4), st.integers(1, 30)), elements=finite_or_nan))
def test_local_minima_1d(values):
    shape = (values.shape[1],)
    assert np.array_equal(NB["local_minima_mask"](values, shape), NP["local_minima_mask"](values, shape))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 7), st.integers(1, 7), st.data())
def test_local_minima_2d(k, n0, n1, data):
    values = data.draw(hnp.arrays(float, (k, n0 * n1), elements=st.sampled_from([0.0, 1.0, 2.0, np.nan])))
    shape = (n0, n1)
    assert np.array_equal(NB["local_minima_mask"](values, shape), NP["local_minima_mask"](values, shape))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(float, (2, 3 * 4 * 2), elements=st.sampled_from([0.0, 1.0, -1.0, np.nan])))
def test_local_minima_3d(values):
    shape = (3, 4, 2)
    assert np.array_equal(NB["local_minima_mask"](values, shape), NP["local_minima_mask"](values, shape))


def test_local_minima_known():
    v = np.array([[3.0, 1.0, 2.0, 2.0, 0.0]])
    assert NP["local_minima_mask"](v, (5,)).tolist() == [[False, True, False, False, True]]


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(float, st.tuples(st.integers(1, 3), st.integers(1, 20)),
                  elements=st.sampled_from([-1.0, 0.0, 2.0, np.nan])))
def test_sign_change(g):
    assert np.array_equal(NB["sign_change_mask"](g), NP["sign_change_mask"](g))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(float, st.tuples(st.integers(0, 25), st.integers(1, 3)), elements=st.floats(-1, 1)),
       st.floats(0.01, 1.0))
def test_cluster_labels(points, radius):
    assert np.array_equal(NB["cluster_labels"](points, radius), NP["cluster_labels"](points, radius))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(0, 10), st.integers(0, 10), st.data())
def test_hausdorff(dim, na, nb, data):
    A = data.draw(hnp.arrays(float, (na, dim), elements=st.floats(-3, 3)))
    B = data.draw(hnp.arrays(float, (nb, dim), elements=st.floats(-3, 3)))
    a, b = NB["hausdorff"](A, B), NP["hausdorff"](A, B)
    assert a == pytest.approx(b, abs=1e-12) or (np.isinf(a) and np.isinf(b))


def test_hausdorff_brute_force():
    rng = np.random.default_rng(1)
    A, B = rng.random((7, 2)), rng.random((5, 2))
    D = np.linalg.norm(A[:, None] - B[None], axis=2)
    assert K.hausdorff(A, B) == pytest.approx(max(D.min(1).max(), D.min(0).max()))
    assert K.hausdorff(A, np.zeros((0, 2))) == np.inf


def test_flag_selects_backend():
    assert K.USE_NUMBA == (K.HAVE_NUMBA and __import__("os").environ.get("BDFOA_NUMBA", "1") != "0")

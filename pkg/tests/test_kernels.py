import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfsmp import _kernels as kr

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
needs_numba = pytest.mark.skipif(not kr.HAVE_NUMBA, reason="numba path disabled")


def square(n_max=12):
    return st.integers(1, n_max).flatmap(lambda n: st.tuples(arrays(float, (n, n), elements=finite),
                                                              arrays(float, (n,), elements=finite)))


@given(square())
@settings(deadline=None)  # first call pays the JIT compile
def test_row_and_col_mean_match_definition(Kv):
    K, v = Kv
    np.testing.assert_allclose(kr.row_mean(K, v), (K * v).mean(axis=1), rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(kr.col_mean(K, v), (K * v[:, None]).mean(axis=0), rtol=1e-12, atol=1e-9)


@given(square(), st.randoms(use_true_random=False))
@settings(deadline=None)
def test_row_mean_is_permutation_equivariant(Kv, rnd):
    K, v = Kv
    perm = np.array(rnd.sample(range(v.size), v.size))
    lhs = kr.row_mean(K[np.ix_(perm, perm)], v[perm])
    np.testing.assert_allclose(lhs, kr.row_mean(K, v)[perm], rtol=1e-12, atol=1e-9)


@given(st.integers(1, 6), st.integers(1, 30), st.integers(1, 6), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_matmul_mean_and_xty(n, m, d, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, m)), rng.normal(size=(m, d))
    np.testing.assert_allclose(kr.matmul_mean(A, B), A @ B / m, rtol=1e-12, atol=1e-12)
    X = rng.normal(size=(m, d))
    np.testing.assert_allclose(kr.xty(X, X), X.T @ X, rtol=1e-12, atol=1e-12)
    G, r = kr.gram(X, X[:, 0])
    np.testing.assert_allclose(G, X.T @ X, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(r, X.T @ X[:, 0], rtol=1e-12, atol=1e-12)


def test_tensor_design_layout():
    Pi = np.arange(6.0).reshape(2, 3)
    Pj = np.arange(4.0).reshape(2, 2) + 1
    D = kr.tensor_design(Pi, Pj)
    assert D.shape == (4, 6)
    for i in range(2):
        for j in range(2):
            np.testing.assert_array_equal(D[i * 2 + j], np.kron(Pi[i], Pj[j]))


@needs_numba
@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_numba_and_numpy_paths_agree(seed):
    rng = np.random.default_rng(seed)
    K, v = rng.normal(size=(9, 9)), rng.normal(size=9)
    A, B = rng.normal(size=(4, 50)), rng.normal(size=(50, 4))
    pairs = [
        (kr._row_mean_nb(K, v), kr._row_mean_np(K, v)),
        (kr._col_mean_nb(K, v), kr._col_mean_np(K, v)),
        (kr._matmul_mean_nb(A, B), kr._matmul_mean_np(A, B)),
        (kr._xty_nb(B, B), kr._xty_np(B, B)),
        (kr._tensor_design_nb(K[:, :3], K[:, :2]), kr._tensor_design_np(K[:, :3], K[:, :2])),
    ]
    for a, b in pairs:
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_disable_flag_selects_numpy_backend():
    env = dict(os.environ, MFSMP_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "import mfsmp; print(mfsmp.backend())"], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"

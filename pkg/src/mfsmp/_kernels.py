"""Hot inner loops shared by the particle solvers.

Every kernel exists twice: a numba ``@njit`` version with a fixed summation
order, and a plain numpy version. Set ``MFSMP_DISABLE_NUMBA=1`` before import
to force the numpy path (useful for debugging and for platforms without numba).

The numba loops are serial on purpose: their reductions run in a fixed order,
so results do not depend on BLAS threading.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("MFSMP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by MFSMP_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def _row_mean_np(K: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (K * v[None, :]).mean(axis=1)


def _col_mean_np(K: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (K * v[:, None]).mean(axis=0)


def _matmul_mean_np(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("ik,kj->ij", A, B, optimize=False) / A.shape[1]


def _gram_np(A: np.ndarray, y: np.ndarray):
    return A.T @ A, A.T @ y


def _xty_np(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("ni,nj->ij", A, B, optimize=False)


def _tensor_design_np(Pi: np.ndarray, Pj: np.ndarray) -> np.ndarray:
    n, d = Pi.shape
    e = Pj.shape[1]
    return (Pi[:, None, :, None] * Pj[None, :, None, :]).reshape(n * Pj.shape[0], d * e)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _row_mean_nb(K, v):
        n, m = K.shape
        out = np.empty(n)
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += K[i, j] * v[j]
            out[i] = s / m
        return out

    @njit(cache=True)
    def _col_mean_nb(K, v):
        n, m = K.shape
        out = np.zeros(m)
        for i in range(n):
            vi = v[i]
            for j in range(m):
                out[j] += K[i, j] * vi
        for j in range(m):
            out[j] /= n
        return out

    @njit(cache=True)
    def _matmul_mean_nb(A, B):
        n, m = A.shape
        p = B.shape[1]
        out = np.zeros((n, p))
        for i in range(n):
            for k in range(m):
                a = A[i, k]
                for j in range(p):
                    out[i, j] += a * B[k, j]
        for i in range(n):
            for j in range(p):
                out[i, j] /= m
        return out

    @njit(cache=True)
    def _gram_nb(A, y):
        n, d = A.shape
        G = np.zeros((d, d))
        r = np.zeros(d)
        for i in range(n):
            yi = y[i]
            for a in range(d):
                Aa = A[i, a]
                r[a] += Aa * yi
                for b in range(a, d):
                    G[a, b] += Aa * A[i, b]
        for a in range(d):
            for b in range(a):
                G[a, b] = G[b, a]
        return G, r

    @njit(cache=True)
    def _xty_nb(A, B):
        n, p = A.shape
        q = B.shape[1]
        out = np.zeros((p, q))
        for i in range(n):
            for a in range(p):
                Aa = A[i, a]
                for b in range(q):
                    out[a, b] += Aa * B[i, b]
        return out

    @njit(cache=True)
    def _tensor_design_nb(Pi, Pj):
        n, d = Pi.shape
        m, e = Pj.shape
        out = np.empty((n * m, d * e))
        for i in range(n):
            for j in range(m):
                row = i * m + j
                for a in range(d):
                    pa = Pi[i, a]
                    for b in range(e):
                        out[row, a * e + b] = pa * Pj[j, b]
        return out


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def row_mean(K: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``out[i] = mean_j K[i, j] v[j]``."""
    K, v = _f64(K), _f64(v)
    return _row_mean_nb(K, v) if HAVE_NUMBA else _row_mean_np(K, v)


def col_mean(K: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``out[j] = mean_i K[i, j] v[i]`` (the transposed pairing)."""
    K, v = _f64(K), _f64(v)
    return _col_mean_nb(K, v) if HAVE_NUMBA else _col_mean_np(K, v)


def matmul_mean(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``out[i, j] = mean_k A[i, k] B[k, j]``; the third-copy average."""
    A, B = _f64(A), _f64(B)
    return _matmul_mean_nb(A, B) if HAVE_NUMBA else _matmul_mean_np(A, B)


def gram(A: np.ndarray, y: np.ndarray):
    """Normal-equation blocks ``(A^T A, A^T y)``."""
    A, y = _f64(A), _f64(y)
    return _gram_nb(A, y) if HAVE_NUMBA else _gram_np(A, y)


def xty(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``A^T B`` with a fixed summation order over rows."""
    A, B = _f64(A), _f64(B)
    return _xty_nb(A, B) if HAVE_NUMBA else _xty_np(A, B)


def tensor_design(Pi: np.ndarray, Pj: np.ndarray) -> np.ndarray:
    """Rows ``(i, j)`` in C order, columns ``Pi[i, a] * Pj[j, b]``."""
    Pi, Pj = _f64(Pi), _f64(Pj)
    return _tensor_design_nb(Pi, Pj) if HAVE_NUMBA else _tensor_design_np(Pi, Pj)

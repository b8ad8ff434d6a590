"""Empirical measures on R and R^2, the 1-D Wasserstein-2 distance, and
numerical checks of first/second-order expansions over P_2.

Copy-space expectations (the tilde/hat brackets) are averages over a second
index range of the same ensemble; see :func:`copy_mean`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms in R (shape ``(n,)``) or R^2 (shape ``(n, 2)``)."""

    atoms: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim not in (1, 2) or (atoms.ndim == 2 and atoms.shape[1] != 2):
            raise ValueError(f"atoms must have shape (n,) or (n, 2), got {atoms.shape}")
        if atoms.shape[0] == 0:
            raise ValueError("empty measure")
        object.__setattr__(self, "atoms", atoms)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (atoms.shape[0],) or np.any(w < 0):
                raise ValueError("weights must be nonnegative with one entry per atom")
            if abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
            object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return 1 if self.atoms.ndim == 1 else 2

    def w(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> float | np.ndarray:
        vals = np.asarray(fn(self.atoms), dtype=float)
        if self.weights is None:
            return vals.mean(axis=0)
        return np.tensordot(self.weights, vals, axes=(0, 0))

    @cached_property
    def _moments(self):
        return self.expect(lambda a: a), self.expect(lambda a: a * a)

    def mean(self) -> float | np.ndarray:
        return self._moments[0]

    def second_moment(self) -> float | np.ndarray:
        return self._moments[1]

    def marginal(self, k: int) -> "EmpiricalMeasure":
        if self.dim == 1:
            raise ValueError("marginal of a 1-D measure")
        return EmpiricalMeasure(self.atoms[:, k], self.weights)

    def shifted(self, delta: np.ndarray) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.atoms + delta, self.weights)


def _quantile_pieces(m: EmpiricalMeasure):
    order = np.argsort(m.atoms, kind="stable")
    return m.atoms[order], np.cumsum(m.w()[order])


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """W_2 between 1-D empirical measures via the quantile coupling."""
    if mu.dim != 1 or nu.dim != 1:
        raise ValueError("wasserstein2 needs one-dimensional measures")
    if mu.weights is None and nu.weights is None and mu.size == nu.size:
        d = np.sort(mu.atoms) - np.sort(nu.atoms)
        return float(np.sqrt(np.mean(d * d)))
    xa, ca = _quantile_pieces(mu)
    xb, cb = _quantile_pieces(nu)
    cuts = np.union1d(ca, cb)
    cuts = cuts[(cuts > 0) & (cuts < 1 + 1e-15)]
    cuts[-1] = 1.0
    lo = np.concatenate([[0.0], cuts[:-1]])
    mid = 0.5 * (lo + cuts)
    ia = np.minimum(np.searchsorted(ca, mid), xa.size - 1)
    ib = np.minimum(np.searchsorted(cb, mid), xb.size - 1)
    d = xa[ia] - xb[ib]
    return float(np.sqrt(np.sum((cuts - lo) * d * d)))


# ------------------------------------------------------------ copy averages


def copy_mean(K, v: np.ndarray) -> np.ndarray:
    """``out[i] = mean_j K[i, j] v[j]`` for a kernel given in broadcast form.

    ``K`` may be a scalar, ``(1, m)`` (depends on the copy only), ``(n, 1)``
    (depends on the own index only) or a full ``(n, m)`` array. The reduced
    forms avoid materialising an n x m matrix on large ensembles.
    """
    v = np.asarray(v, dtype=float)
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        return np.asarray(K * v.mean())
    if K.ndim != 2:
        raise ValueError(f"kernel must be scalar or 2-D, got shape {K.shape}")
    n, m = K.shape
    if m == 1:
        return K[:, 0] * v.mean()
    if m != v.shape[0]:
        raise ValueError(f"kernel has {m} copy columns, values have {v.shape[0]}")
    if n == 1:
        return np.asarray(np.mean(K[0] * v))
    return _kernels.row_mean(K, v)


def copy_mean_t(K, v: np.ndarray) -> np.ndarray:
    """Starred pairing: ``out[i] = mean_j K[j, i] v[j]``."""
    K = np.asarray(K, dtype=float)
    if K.ndim == 2:
        return copy_mean(K.T, v)
    return copy_mean(K, v)


def as_full(K, n: int, m: int | None = None) -> np.ndarray:
    m = n if m is None else m
    return np.ascontiguousarray(np.broadcast_to(np.asarray(K, dtype=float), (n, m)))


# ------------------------------------------------------- expansion checks


def _slope(h: np.ndarray, r: np.ndarray) -> float:
    mask = r > 0
    if mask.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[mask]), np.log(r[mask]), 1)[0])


@dataclass
class ExpansionTable:
    h: np.ndarray
    remainder: np.ndarray
    slope: float
    order: int

    def rows(self):
        for h, r in zip(self.h, self.remainder):
            yield {"h": float(h), "remainder": float(r), "scaled": float(abs(r) / h**self.order)}


def first_order_expansion_check(
    f: Callable[[EmpiricalMeasure], float],
    d_mu_f: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray],
    sampler: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]],
    eta_scale,
    sample_size: int,
    seed: int,
) -> ExpansionTable:
    """R(h) = f(P_{xi+h eta}) - f(P_xi) - E[d_mu f(P_xi, xi) h eta] for each h.

    One (xi, eta) sample is shared by all scales. A degenerate sample (all atoms
    equal) is fine: the functional is evaluated as is.
    """
    rng = np.random.default_rng(seed)
    xi, eta = sampler(rng, sample_size)
    base = EmpiricalMeasure(xi)
    f0 = f(base)
    grad = np.asarray(d_mu_f(base, xi), dtype=float)
    hs = np.asarray(eta_scale, dtype=float)
    rem = np.empty(hs.size)
    for n, h in enumerate(hs):
        rem[n] = f(base.shifted(h * eta)) - f0 - np.mean(grad * h * eta)
    return ExpansionTable(hs, rem, _slope(hs, np.abs(rem)), 1)


def second_order_expansion_check(
    f: Callable[[EmpiricalMeasure], float],
    d_mu_f: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray],
    dx_d_mu_f: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray],
    d2_mu_f: Callable[[EmpiricalMeasure, np.ndarray, np.ndarray], np.ndarray],
    sampler: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]],
    eta_scale,
    sample_size: int,
    seed: int,
) -> ExpansionTable:
    """Third-order remainder of the second-order expansion over P_2.

    The tensor term E E~[d2_mu f(P_xi, xi, xi~) eta eta~] is a full double
    average over the sample, diagonal included.
    """
    rng = np.random.default_rng(seed)
    xi, eta = sampler(rng, sample_size)
    base = EmpiricalMeasure(xi)
    f0 = f(base)
    g1 = np.asarray(d_mu_f(base, xi), dtype=float)
    g2 = np.asarray(dx_d_mu_f(base, xi), dtype=float)
    kern = np.asarray(d2_mu_f(base, xi[:, None], xi[None, :]), dtype=float)
    hs = np.asarray(eta_scale, dtype=float)
    rem = np.empty(hs.size)
    lin = np.mean(g1 * eta)
    quad = 0.5 * np.mean(g2 * eta * eta) + 0.5 * float(np.mean(copy_mean(kern, eta) * eta))
    for n, h in enumerate(hs):
        rem[n] = f(base.shifted(h * eta)) - f0 - h * lin - h * h * quad
    return ExpansionTable(hs, rem, _slope(hs, np.abs(rem)), 2)


@dataclass(frozen=True)
class PolynomialFunctional:
    """A moment polynomial on P_2(R) with its closed-form L-derivatives."""

    name: str
    f: Callable[[EmpiricalMeasure], float]
    d_mu: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray]
    dx_d_mu: Callable[[EmpiricalMeasure, np.ndarray], np.ndarray]
    d2_mu: Callable[[EmpiricalMeasure, np.ndarray, np.ndarray], np.ndarray]


def polynomial_battery() -> list[PolynomialFunctional]:
    """Cubic and quartic moment functionals whose third-order remainders do not vanish."""
    m = lambda mu: float(mu.mean())  # noqa: E731
    S = lambda mu: float(mu.second_moment())  # noqa: E731
    M3 = lambda mu: float(mu.expect(lambda a: a ** 3))  # noqa: E731
    zero2 = lambda mu, x, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y)))  # noqa: E731
    return [
        PolynomialFunctional("mean^3", lambda mu: m(mu) ** 3,
                             lambda mu, x: np.full_like(x, 3 * m(mu) ** 2, dtype=float),
                             lambda mu, x: np.zeros_like(x, dtype=float),
                             lambda mu, x, y: np.full(np.broadcast_shapes(np.shape(x), np.shape(y)), 6 * m(mu))),
        PolynomialFunctional("third moment", M3, lambda mu, x: 3 * x * x, lambda mu, x: 6 * x, zero2),
        PolynomialFunctional("mean * second moment", lambda mu: m(mu) * S(mu),
                             lambda mu, x: S(mu) + 2 * x * m(mu),
                             lambda mu, x: np.full_like(x, 2 * m(mu), dtype=float),
                             lambda mu, x, y: 2 * x + 2 * y),
        PolynomialFunctional("second moment^2", lambda mu: S(mu) ** 2,
                             lambda mu, x: 4 * x * S(mu),
                             lambda mu, x: np.full_like(x, 4 * S(mu), dtype=float),
                             lambda mu, x, y: 8 * x * y),
        PolynomialFunctional("mean * third moment", lambda mu: m(mu) * M3(mu),
                             lambda mu, x: M3(mu) + 3 * x * x * m(mu),
                             lambda mu, x: 6 * x * m(mu),
                             lambda mu, x, y: 3 * x * x + 3 * y * y),
    ]

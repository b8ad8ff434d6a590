"""Adjoint BSDEs, the Ito expansion of the cost perturbation, and its remainders.

Single-index adjoints (p1, q11) and (P1, Q11) live on the full ensemble.
Pair-indexed adjoints (p2, q21, q22) and (P2, Q21, Q22) are solved densely on
the first ``pair_size`` particles (own index i, copy index j) and stored both as
matrices and as coefficients on a tensor polynomial basis, so their copy
averages can be evaluated on the full ensemble. Third-copy brackets inside
the drivers are averaged over the full ensemble through those coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from . import _kernels
from .bsde import (BackwardSolution, GeneratorPath, PairProjector, RegressionBasis, generator_path,
                   solve_linear_mf_bsde, solve_quadratic_mf_bsde)
from .forward import (LinearisedCoefficients, ParticleEnsemble, SpikePlan, TimeGrid, linearise_forward,
                      simulate_forward)
from .measure import as_full, copy_mean
from .model import ControlProblem

PAIR_MEMORY_BUDGET = 1 << 30  # bytes for the dense pair processes of one solve


class PairMemoryError(MemoryError):
    pass


# ------------------------------------------------------------ optimal solve


@dataclass
class OptimalSolve:
    """Forward ensemble and backward solution along a given (optimal) control."""

    problem: ControlProblem
    ensemble: ParticleEnsemble
    backward: BackwardSolution
    basis: RegressionBasis

    @cached_property
    def lin(self) -> LinearisedCoefficients:
        return linearise_forward(self.problem, self.ensemble)

    @cached_property
    def gen(self) -> GeneratorPath:
        return generator_path(self.problem, self.ensemble, self.backward)

    @property
    def grid(self) -> TimeGrid:
        return self.ensemble.grid

    def terminal_law(self):
        return self.ensemble.law(self.grid.steps)


def solve_optimal(problem: ControlProblem, control, grid: TimeGrid, n_particles: int, seed: int,
                  basis: RegressionBasis | None = None, z_cap: float | None = None, strict: bool = False,
                  dB: np.ndarray | None = None, picard_tol: float = 1e-10,
                  base_steps: int | None = None) -> OptimalSolve:
    basis = basis or RegressionBasis()
    ens = simulate_forward(problem, control, grid, n_particles, seed, dB=dB, base_steps=base_steps)
    sol = solve_quadratic_mf_bsde(problem, ens, basis, z_cap=z_cap, strict=strict, picard_tol=picard_tol)
    return OptimalSolve(problem, ens, sol, basis)


# ------------------------------------------------------------ copy operators


class CopyOperator:
    """Linear map ``v -> (mean_j A[i, j] v_j)_i`` on one ensemble.

    Operators add, scale on the own side (``left``) or the copy side
    (``right``) and compose with ``@``, which realises the third-copy average
    ``mean_l A[i, l] B[l, j]``.
    """

    __slots__ = ("fn",)

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def __call__(self, v) -> np.ndarray:
        return self.fn(np.asarray(v, dtype=float))

    @classmethod
    def kernel(cls, K) -> "CopyOperator":
        if np.ndim(K) == 0 and float(K) == 0.0:
            return ZERO
        return cls(lambda v: np.asarray(copy_mean(K, v)) + 0.0 * v)

    @classmethod
    def kernel_t(cls, K) -> "CopyOperator":
        """Starred pairing ``mean_j K[j, i] v_j``."""
        Kt = np.asarray(K).T if np.ndim(K) == 2 else K
        return cls.kernel(Kt)

    @classmethod
    def tensor(cls, features: np.ndarray, C: np.ndarray) -> "CopyOperator":
        n = features.shape[0]
        if not np.any(C):
            return ZERO

        def fn(v):
            return features @ (C @ _kernels.xty(features, v[:, None])[:, 0]) / n

        return cls(fn)

    def scale(self, left=None, right=None) -> "CopyOperator":
        if self is ZERO:
            return ZERO
        f = self.fn
        if right is not None:
            r = np.asarray(right, dtype=float)
            g = f
            f = lambda v, g=g: g(r * v)  # noqa: E731
        if left is not None:
            l_ = np.asarray(left, dtype=float)
            h = f
            f = lambda v, h=h: l_ * h(v)  # noqa: E731
        return CopyOperator(f)

    def __add__(self, other: "CopyOperator") -> "CopyOperator":
        if other is ZERO:
            return self
        if self is ZERO:
            return other
        return CopyOperator(lambda v: self.fn(v) + other.fn(v))

    def __sub__(self, other: "CopyOperator") -> "CopyOperator":
        return self + other.scale(left=-1.0)

    def __matmul__(self, other: "CopyOperator") -> "CopyOperator":
        if self is ZERO or other is ZERO:
            return ZERO
        return CopyOperator(lambda v: self.fn(other.fn(v)))


ZERO = CopyOperator.__new__(CopyOperator)
ZERO.fn = lambda v: np.zeros_like(v)


# ------------------------------------------------------------ pair processes


@dataclass
class PairProcess:
    """Two-parameter process: ``values[k][i][j]`` on the pair subset plus tensor coefficients.

    ``driver`` records which Brownian motion the process (or integrand) is
    attached to: ``"B"`` for the own index i, ``"B~"`` for the copy index j,
    ``"value"`` for the process itself.
    """

    values: np.ndarray  # (nodes, n, n)
    coef: np.ndarray  # (nodes, d, d)
    centers: np.ndarray
    scales: np.ndarray
    basis: RegressionBasis
    driver: str = "value"

    @property
    def size(self) -> int:
        return self.values.shape[1]

    def features(self, k: int, x: np.ndarray) -> np.ndarray:
        return self.basis.features(x, self.centers[k], self.scales[k])

    def evaluate(self, k: int, x: np.ndarray, xt: np.ndarray) -> np.ndarray:
        return self.features(k, x) @ self.coef[k] @ self.features(k, xt).T

    def op(self, k: int, x: np.ndarray) -> CopyOperator:
        """Copy average ``v -> mean_j F(x_i, x_j) v_j`` on the states ``x``."""
        return CopyOperator.tensor(self.features(k, x), self.coef[k])

    def is_zero(self) -> bool:
        return not (np.any(self.values) or np.any(self.coef))


def _zero_pair(nodes, n, basis, driver):
    d = basis.size
    return PairProcess(np.zeros((nodes, n, n)), np.zeros((nodes, d, d)), np.zeros(nodes), np.ones(nodes),
                       basis, driver)


@dataclass
class AdjointBundle:
    p1: np.ndarray  # (steps + 1, N)
    q11: np.ndarray  # (steps, N)
    P1: np.ndarray
    Q11: np.ndarray
    p2: PairProcess
    q21: PairProcess
    q22: PairProcess
    P2: PairProcess
    Q21: PairProcess
    Q22: PairProcess
    gamma: np.ndarray | None = None
    logs: dict = field(default_factory=dict)

    @property
    def q12(self) -> np.ndarray:
        return np.zeros_like(self.q11)

    @property
    def Q12(self) -> np.ndarray:
        return np.zeros_like(self.Q11)


# ----------------------------------------------------------- single index


def _quad_form(h, a, c):
    """<D^2 f v, v> for v = (1, a, c) with h = (xx, xy, xz, yy, yz, zz)."""
    xx, xy, xz, yy, yz, zz = h
    return xx + 2 * a * xy + 2 * c * xz + a * a * yy + 2 * a * c * yz + c * c * zz


def _stack(rows, n):
    return np.array([np.broadcast_to(np.asarray(r, dtype=float), (n,)) for r in rows])


def solve_p1(opt: OptimalSolve, basis: RegressionBasis | None = None):
    """First-order adjoint (p1, q11) with driver f_x + p1 (b_x + f_y + sigma_x f_z) + q11 (sigma_x + f_z)."""
    basis = basis or opt.basis
    n = opt.ensemble.n_particles
    lin, gen = opt.lin, opt.gen
    bx, sx = _stack(lin.b_x, n), _stack(lin.sigma_x, n)
    XT = opt.ensemble.X[-1]
    xi = np.broadcast_to(opt.problem.derivatives.phi_x(XT, opt.terminal_law()), (n,))
    sol = solve_linear_mf_bsde(opt.ensemble, xi, rho=bx + gen.f_y + sx * gen.f_z, varpi=sx + gen.f_z,
                               phi=gen.f_x, basis=basis)
    return sol.Y, sol.Z


def solve_P1(opt: OptimalSolve, p1: np.ndarray, q11: np.ndarray, basis: RegressionBasis | None = None):
    """Second-order adjoint (P1, Q11)."""
    basis = basis or opt.basis
    n = opt.ensemble.n_particles
    lin, gen = opt.lin, opt.gen
    bx, sx = _stack(lin.b_x, n), _stack(lin.sigma_x, n)
    bxx, sxx = _stack(lin.b_xx, n), _stack(lin.sigma_xx, n)
    steps = opt.grid.steps
    p = p1[:steps]
    quad = np.array([_quad_form([np.broadcast_to(h, (n,)) for h in gen.hess[k]], p[k], p[k] * sx[k] + q11[k])
                     for k in range(steps)])
    source = p * bxx + sxx * (gen.f_z * p + q11) + quad
    XT = opt.ensemble.X[-1]
    xi = np.broadcast_to(opt.problem.derivatives.phi_xx(XT, opt.terminal_law()), (n,))
    sol = solve_linear_mf_bsde(opt.ensemble, xi, rho=2 * bx + sx * sx + gen.f_y + 2 * gen.f_z * sx,
                               varpi=2 * sx + gen.f_z, phi=source, basis=basis)
    return sol.Y, sol.Z


# ------------------------------------------------------------- pair solves


def _slice_kernel(K, rows, cols):
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        return K
    r = K if K.shape[0] == 1 else K[rows]
    return r if r.shape[1] == 1 else r[:, cols]


@dataclass
class _PairNode:
    """Per-node ingredients of the pair drivers on the subset."""

    phi: np.ndarray  # (n, d) subset features
    Kfx: np.ndarray
    Kb: np.ndarray
    Ks: np.ndarray
    Kfy: np.ndarray
    Kbxx: np.ndarray
    Ksxx: np.ndarray
    J: tuple
    W_b: np.ndarray  # (d, n) = mean_l phi(x_l) Kb(l, j) over the full ensemble
    W_s: np.ndarray
    W_bxx: np.ndarray
    W_sxx: np.ndarray
    V_fy: np.ndarray  # (n, d) = mean_l Kfy(i, l) phi(x_l)


def _pair_node(opt: OptimalSolve, k: int, n: int, basis: RegressionBasis, center: float, scale: float):
    ens, lin, gen = opt.ensemble, opt.lin, opt.gen
    N = ens.n_particles
    sub = slice(0, n)
    full = slice(None)
    x_big = ens.X[k]
    phi_big = basis.features(x_big, center, scale)
    phi = phi_big[:n]

    def dense(K):
        return as_full(_slice_kernel(K, sub, sub), n)

    def right(K):  # (d, n): mean_l phi(x_l) K[l, j], l over the full ensemble, j in the subset
        return _kernels.xty(phi_big, as_full(_slice_kernel(K, full, sub), N, n)) / N

    def left(K):  # (n, d): mean_l K[i, l] phi(x_l)
        Kf = as_full(_slice_kernel(K, sub, full), n, N)
        return _kernels.xty(np.ascontiguousarray(Kf.T), phi_big) / N

    return _PairNode(
        phi, dense(gen.f_mu_x[k]), dense(lin.b_mu[k]), dense(lin.sigma_mu[k]), dense(gen.f_mu_y[k]),
        dense(lin.b_xmu[k]), dense(lin.sigma_xmu[k]), tuple(dense(J) for J in gen.f_mu_jac[k]),
        right(lin.b_mu[k]), right(lin.sigma_mu[k]), right(lin.b_xmu[k]), right(lin.sigma_xmu[k]),
        left(gen.f_mu_y[k]),
    )


def _pair_projectors(opt: OptimalSolve, n: int, basis: RegressionBasis):
    key = ("pair-projectors", basis, n)
    cache = opt.ensemble.cache
    if key not in cache:
        ens = opt.ensemble
        g = ens.grid
        inc = [PairProjector(ens.X[k][:n], basis, ens.dB[k][:n], g.dt) for k in range(g.steps)]
        val = [PairProjector(ens.X[k][:n], basis) for k in range(g.steps + 1)]
        cache[key] = (inc, val)
    return cache[key]


def _check_budget(nodes, n, count=6, budget=None):
    budget = PAIR_MEMORY_BUDGET if budget is None else budget
    need = nodes * n * n * 8 * count
    if need > budget:
        raise PairMemoryError(f"pair processes need {need / 2**20:.0f} MiB > budget {budget / 2**20:.0f} MiB;"
                              f" reduce the pair subset (N_p={n}) or N_t")


def _pair_solve(opt, n, basis, terminal, driver, tol=1e-13, max_iter=50):
    """Backward pair BSDE; ``driver(k, node, P, CP, q21, q22, Cq21, Cq22)`` returns the driver matrix."""
    g = opt.grid
    dt = g.dt
    inc, val = _pair_projectors(opt, n, basis)
    d = basis.size
    V = np.zeros((g.steps + 1, n, n))
    Zi = np.zeros((g.steps, n, n))
    Zj = np.zeros((g.steps, n, n))
    Cv = np.zeros((g.steps + 1, d, d))
    Ci = np.zeros((g.steps, d, d))
    Cj = np.zeros((g.steps, d, d))
    centers = np.array([p.center for p in val])
    scales = np.array([p.scale for p in val])
    V[-1] = terminal
    Cv[-1] = val[-1].fit(terminal)[0].C_value
    iters = []
    for k in range(g.steps - 1, -1, -1):
        fit, cond, zi, zj = inc[k].fit(V[k + 1])
        Zi[k], Zj[k], Ci[k], Cj[k] = zi, zj, fit.C_zi, fit.C_zj
        node = _pair_node(opt, k, n, basis, centers[k], scales[k])
        P = cond.copy()
        for it in range(max_iter):
            CP = val[k].fit(P)[0].C_value
            new = cond + driver(k, node, P, CP, zi, zj, fit.C_zi, fit.C_zj) * dt
            change = float(np.max(np.abs(new - P)))
            P = new
            if change <= tol * max(1.0, float(np.max(np.abs(P)))):
                break
        iters.append(it + 1)
        V[k] = P
        Cv[k] = val[k].fit(P)[0].C_value
    value = PairProcess(V, Cv, centers, scales, basis, "value")
    q1 = PairProcess(Zi, Ci, centers[:-1], scales[:-1], basis, "B")
    q2 = PairProcess(Zj, Cj, centers[:-1], scales[:-1], basis, "B~")
    return value, q1, q2, iters


def _vec(x, n, N):
    return np.broadcast_to(np.asarray(x, dtype=float), (N,))[:n]


def solve_p2(opt: OptimalSolve, p1: np.ndarray, q11: np.ndarray, pair_size: int = 64,
             basis: RegressionBasis | None = None, memory_budget: int | None = None):
    """Pair adjoint (p2, q21, q22) on the first ``pair_size`` particles."""
    basis = basis or RegressionBasis(degree=2)
    ens, lin, gen = opt.ensemble, opt.lin, opt.gen
    N = ens.n_particles
    n = min(pair_size, N)
    _check_budget(opt.grid.steps + 1, n, budget=memory_budget)
    XT = ens.X[-1]
    lawT = opt.terminal_law()
    term = as_full(opt.problem.derivatives.phi_mu(XT[:n, None], lawT, XT[None, :n]), n)

    def driver(k, nd, P, CP, zi, zj, Ci, Cj):
        p1i = p1[k][:n]
        q11i = q11[k][:n]
        fz = gen.f_z[k][:n]
        fy = gen.f_y[k][:n]
        bx = _vec(lin.b_x[k], n, N)
        sx = _vec(lin.sigma_x[k], n, N)
        phi = nd.phi
        return (nd.Kfx + p1i[:, None] * (nd.Kb + fz[:, None] * nd.Ks) + p1i[None, :] * nd.Kfy
                + q11i[:, None] * nd.Ks + P * (bx[None, :] + fy[:, None])
                + phi @ CP @ nd.W_b + nd.V_fy @ CP @ phi.T
                + zi * fz[:, None] + phi @ Cj @ nd.W_s + zj * sx[None, :])

    p2, q21, q22, iters = _pair_solve(opt, n, basis, term, driver)
    return p2, q21, q22


def solve_P2(opt: OptimalSolve, p1, q11, P1, p2: PairProcess, q22: PairProcess, pair_size: int = 64,
             basis: RegressionBasis | None = None, memory_budget: int | None = None):
    """Second-order pair adjoint (P2, Q21, Q22)."""
    basis = basis or p2.basis
    ens, lin, gen = opt.ensemble, opt.lin, opt.gen
    N = ens.n_particles
    n = min(pair_size, N)
    _check_budget(opt.grid.steps + 1, n, budget=memory_budget)
    XT = ens.X[-1]
    lawT = opt.terminal_law()
    term = as_full(opt.problem.derivatives.phi_xmu(XT[:n, None], lawT, XT[None, :n]), n)

    def driver(k, nd, P, CP, zi, zj, Ci, Cj):
        p1i, q11i, P1i = p1[k][:n], q11[k][:n], P1[k][:n]
        fz, fy = gen.f_z[k][:n], gen.f_y[k][:n]
        bx, sx = _vec(lin.b_x[k], n, N), _vec(lin.sigma_x[k], n, N)
        bxx, sxx = _vec(lin.b_xx[k], n, N), _vec(lin.sigma_xx[k], n, N)
        phi = nd.phi
        J11, J12, J21, J22 = nd.J
        pj = p1i[None, :]
        return (p1i[:, None] * nd.Kbxx + q11i[:, None] * nd.Ksxx
                + p2.values[k] * bxx[None, :] + phi @ p2.coef[k] @ nd.W_bxx
                + q22.values[k] * sxx[None, :] + phi @ q22.coef[k] @ nd.W_sxx
                + 2 * P * bx[None, :] + P * (sx * sx)[None, :] + 2 * zj * sx[None, :]
                + nd.Kfy * P1i[None, :] + nd.V_fy @ CP @ phi.T + fy[:, None] * P
                + (J11 + (J12 + J21) * pj + J22 * pj * pj)
                + fz[:, None] * (p1i[:, None] * nd.Ksxx + zi))

    P2, Q21, Q22, iters = _pair_solve(opt, n, basis, term, driver)
    return P2, Q21, Q22


def solve_adjoints(opt: OptimalSolve, pair_size: int = 64, pair_basis: RegressionBasis | None = None,
                   memory_budget: int | None = None) -> AdjointBundle:
    p1, q11 = solve_p1(opt)
    P1, Q11 = solve_P1(opt, p1, q11)
    n = min(pair_size, opt.ensemble.n_particles)
    pb = pair_basis or RegressionBasis(degree=2)
    if not opt.problem.mean_field:
        nodes = opt.grid.steps + 1
        z = [_zero_pair(nodes, n, pb, "value"), _zero_pair(nodes - 1, n, pb, "B"), _zero_pair(nodes - 1, n, pb, "B~")]
        Z = [_zero_pair(nodes, n, pb, "value"), _zero_pair(nodes - 1, n, pb, "B"), _zero_pair(nodes - 1, n, pb, "B~")]
        # the solvers would also return exact zeros here; skipping them saves the pair regressions
        return AdjointBundle(p1, q11, P1, Q11, *z, *Z)
    p2, q21, q22 = solve_p2(opt, p1, q11, pair_size, pb, memory_budget)
    P2, Q21, Q22 = solve_P2(opt, p1, q11, P1, p2, q22, pair_size, pb, memory_budget)
    return AdjointBundle(p1, q11, P1, Q11, p2, q21, q22, P2, Q21, Q22)


# ----------------------------------------------------- operators on the ensemble


class NodeOperators:
    """All copy operators of node ``k`` on the full ensemble."""

    def __init__(self, opt: OptimalSolve, adj: AdjointBundle, k: int):
        ens, lin, gen = opt.ensemble, opt.lin, opt.gen
        N = ens.n_particles
        x = ens.X[k]
        self.k = k
        vec = lambda a: np.broadcast_to(np.asarray(a, dtype=float), (N,))  # noqa: E731
        self.p1, self.q11 = adj.p1[k], adj.q11[k]
        self.P1, self.Q11 = adj.P1[k], adj.Q11[k]
        self.b_x, self.sigma_x = vec(lin.b_x[k]), vec(lin.sigma_x[k])
        self.b_xx, self.sigma_xx = vec(lin.b_xx[k]), vec(lin.sigma_xx[k])
        self.f_x, self.f_y, self.f_z = gen.f_x[k], gen.f_y[k], gen.f_z[k]
        self.hess = [vec(h) for h in gen.hess[k]]
        K = CopyOperator.kernel
        self.Kb, self.Ks = K(lin.b_mu[k]), K(lin.sigma_mu[k])
        self.Kbxx, self.Ksxx = K(lin.b_xmu[k]), K(lin.sigma_xmu[k])
        self.Kfx, self.Kfy = K(gen.f_mu_x[k]), K(gen.f_mu_y[k])
        self.J = [K(J) for J in gen.f_mu_jac[k]]
        self.p2, self.q21, self.q22 = adj.p2.op(k, x), adj.q21.op(k, x), adj.q22.op(k, x)
        self.P2, self.Q21, self.Q22 = adj.P2.op(k, x), adj.Q21.op(k, x), adj.Q22.op(k, x)

    @property
    def F1(self):
        return (self.f_x + self.p1 * (self.b_x + self.f_y + self.sigma_x * self.f_z)
                + self.q11 * (self.sigma_x + self.f_z))

    @property
    def G1(self):
        c = self.p1 * self.sigma_x + self.q11
        return (self.p1 * self.b_xx + self.sigma_xx * (self.f_z * self.p1 + self.q11)
                + self.P1 * (2 * self.b_x + self.sigma_x ** 2 + self.f_y + 2 * self.f_z * self.sigma_x)
                + _quad_form(self.hess, self.p1, c) + self.Q11 * (2 * self.sigma_x + self.f_z))

    @property
    def F2(self) -> CopyOperator:
        s = self
        return (s.Kfx + (s.Kb + s.Ks.scale(left=s.f_z)).scale(left=s.p1)
                + s.Kfy.scale(right=s.p1) + s.Ks.scale(left=s.q11)
                + s.p2.scale(right=s.b_x) + s.p2.scale(left=s.f_y)
                + (s.p2 @ s.Kb) + (s.Kfy @ s.p2) + s.q21.scale(left=s.f_z)
                + (s.q22 @ s.Ks) + s.q22.scale(right=s.sigma_x))

    @property
    def G2(self) -> CopyOperator:
        s = self
        J11, J12, J21, J22 = s.J
        return (s.Kbxx.scale(left=s.p1) + s.Ksxx.scale(left=s.q11)
                + s.p2.scale(right=s.b_xx) + (s.p2 @ s.Kbxx)
                + s.q22.scale(right=s.sigma_xx) + (s.q22 @ s.Ksxx)
                + s.P2.scale(right=2 * s.b_x) + s.P2.scale(right=s.sigma_x ** 2) + s.Q22.scale(right=2 * s.sigma_x)
                + s.Kfy.scale(right=s.P1) + (s.Kfy @ s.P2) + s.P2.scale(left=s.f_y)
                + J11 + (J12 + J21).scale(right=s.p1) + J22.scale(right=s.p1 ** 2)
                + (s.Ksxx.scale(left=s.p1) + s.Q21).scale(left=s.f_z))


# ------------------------------------------------------- alpha_1 and M


def alpha1(opt: OptimalSolve, adj: AdjointBundle, spike: SpikePlan,
           lin: LinearisedCoefficients | None = None) -> np.ndarray:
    """alpha_1 on every cell (zero outside the spike set is not applied here)."""
    lin = lin or linearise_forward(opt.problem, opt.ensemble, spike.u_alt)
    g = opt.grid
    out = np.zeros((g.steps, opt.ensemble.n_particles))
    for k in np.flatnonzero(spike.effective_set):
        x = opt.ensemble.X[k]
        db, ds = lin.delta_b[k], lin.delta_sigma[k]
        own = adj.p1[k] * db + adj.q11[k] * ds + 0.5 * adj.P1[k] * ds * ds
        copy = adj.p2.op(k, x)(db) + adj.q22.op(k, x)(ds) + 0.5 * adj.P2.op(k, x)(ds * ds)
        out[k] = own + copy
    return out


@dataclass
class MAssembly:
    M: np.ndarray  # (steps + 1, N)
    drift: np.ndarray  # (steps, N) total drift including R1
    diffusion: np.ndarray  # (steps, N) total diffusion including R2
    copy_martingale: np.ndarray  # (steps, N) finite-N martingale of the copy Brownian motions
    R1: np.ndarray
    R2: np.ndarray
    alpha_terms: dict  # RMS of each drift term over cells and particles
    beta_terms: dict
    residual: np.ndarray  # (steps, N)
    dt: float

    @property
    def residual_rms(self) -> float:
        return float(np.sqrt(np.mean(self.residual ** 2)))

    def M_increment(self) -> np.ndarray:
        return np.diff(self.M, axis=0)


def _M_value(adj, ens, X1, X2, k):
    x = ens.X[k]
    s = X1[k] + X2[k]
    sq = X1[k] ** 2
    M1 = adj.p1[k] * s + 0.5 * adj.P1[k] * sq
    M2 = adj.p2.op(k, x)(s) + 0.5 * adj.P2.op(k, x)(sq)
    return M1 + M2


def assemble_M(opt: OptimalSolve, adj: AdjointBundle, X1: np.ndarray, X2: np.ndarray, spike: SpikePlan,
               lin: LinearisedCoefficients | None = None) -> MAssembly:
    """M = M1 + M2 with the drift/diffusion decomposition and remainders R1, R2.

    The consistency residual compares the increment of M over each cell with
    drift dt + diffusion dB + copy martingale; the last term is the finite-N
    image of the dB~ integrals, which vanish under the copy expectation only in
    the limit.
    """
    ens = opt.ensemble
    g = opt.grid
    if X1.shape != ens.X.shape or X2.shape != ens.X.shape:
        raise ValueError(f"variational paths must have shape {ens.X.shape}")
    lin = lin or linearise_forward(opt.problem, ens, spike.u_alt)
    N = ens.n_particles
    steps = g.steps
    ind = spike.indicator()
    M = np.array([_M_value(adj, ens, X1, X2, k) for k in range(steps + 1)])
    names_a = ["alpha1", "alpha2", "alpha3", "alpha4", "alpha5"]
    names_b = ["beta1", "beta2", "beta3", "beta4", "beta5", "beta6"]
    A = {n: 0.0 for n in names_a}
    Bt = {n: 0.0 for n in names_b}
    drift = np.zeros((steps, N))
    diffusion = np.zeros((steps, N))
    R1 = np.zeros((steps, N))
    R2 = np.zeros((steps, N))
    cm = np.zeros((steps, N))
    for k in range(steps):
        o = NodeOperators(opt, adj, k)
        I = ind[k]
        x1, x2 = X1[k], X2[k]
        s, sq = x1 + x2, x1 * x1
        db, ds, dsx = lin.delta_b[k], lin.delta_sigma[k], lin.delta_sigma_x[k]
        p1, q11, P1, Q11 = o.p1, o.q11, o.P1, o.Q11
        bx, sx, bxx, sxx = o.b_x, o.sigma_x, o.b_xx, o.sigma_xx
        Ks_x1 = o.Ks(x1)
        # own-index coefficients
        a11 = p1 * db + q11 * ds + 0.5 * P1 * ds * ds
        a12 = p1 * bx + q11 * sx - o.F1
        a14 = p1 * bxx + q11 * sxx + 2 * P1 * bx + 2 * Q11 * sx + P1 * sx ** 2 - o.G1
        a16 = q11 * dsx + P1 * sx * ds + Q11 * ds
        # copy-index brackets
        a21 = o.p2(db) + o.q22(ds) + 0.5 * o.P2(ds * ds)
        a13_s = p1 * o.Kb(s) + q11 * o.Ks(s)
        a22_s = o.p2(bx * s) + o.q22(sx * s) + o.p2(o.Kb(s)) + o.q22(o.Ks(s)) - o.F2(s)
        a15_sq = p1 * o.Kbxx(sq) + q11 * o.Ksxx(sq)
        a23_sq = (o.p2(bxx * sq) + o.q22(sxx * sq) + 2 * o.P2(bx * sq) + o.P2(sx ** 2 * sq)
                  + 2 * o.Q22(sx * sq) + o.p2(o.Kbxx(sq)) + o.q22(o.Ksxx(sq)) - o.G2(sq))
        r1 = (a16 * x1 * I + x1 * (P1 * o.Kb(x1) + P1 * sx * Ks_x1 + Q11 * Ks_x1)
              + P1 * ds * Ks_x1 * I + 0.5 * P1 * Ks_x1 ** 2
              + 0.5 * o.P2(Ks_x1 ** 2)
              + o.P2(x1 * o.Kb(x1)) + o.P2(sx * x1 * Ks_x1) + o.Q22(x1 * Ks_x1)
              + (o.q22(dsx * x1) + o.P2(sx * ds * x1) + o.Q22(ds * x1) + o.P2(ds * Ks_x1)) * I)
        terms_a = dict(alpha1=(a11 + a21) * I, alpha2=a12 * s, alpha3=a13_s + a22_s,
                       alpha4=0.5 * a14 * sq, alpha5=0.5 * (a15_sq + a23_sq))
        terms_b = dict(beta1=p1 * ds * I, beta2=(q11 + p1 * sx) * s, beta3=p1 * o.Ks(s) + o.q21(s),
                       beta4=0.5 * (p1 * sxx + Q11 + 2 * P1 * sx) * sq,
                       beta5=0.5 * (p1 * o.Ksxx(sq) + o.Q21(sq)), beta6=(p1 * dsx + P1 * ds) * x1 * I)
        R1[k] = r1
        R2[k] = x1 * P1 * Ks_x1
        drift[k] = sum(terms_a.values()) + r1
        diffusion[k] = sum(terms_b.values()) + R2[k]
        for key, v in terms_a.items():
            A[key] += float(np.sum(v * v))
        for key, v in terms_b.items():
            Bt[key] += float(np.sum(v * v))
        dB = ens.dB[k]
        cm[k] = o.q22(s * dB) + 0.5 * o.Q22(sq * dB)
    cells = steps * N
    A = {key: float(np.sqrt(v / cells)) for key, v in A.items()}
    Bt = {key: float(np.sqrt(v / cells)) for key, v in Bt.items()}
    resid = np.diff(M, axis=0) - drift * g.dt - diffusion * ens.dB - cm
    return MAssembly(M, drift, diffusion, cm, R1, R2, A, Bt, resid, g.dt)


@dataclass
class RemainderReport:
    epsilon: np.ndarray
    R1_stat: np.ndarray  # E[(int |R1| dt)^2]
    R2_stat: np.ndarray  # E[int |R2|^2 dt]
    R1_slope: float
    R2_slope: float


def remainder_statistics(assembly: MAssembly) -> tuple[float, float]:
    dt = assembly.dt
    r1 = float(np.mean((np.sum(np.abs(assembly.R1), axis=0) * dt) ** 2))
    r2 = float(np.mean(np.sum(assembly.R2 ** 2, axis=0) * dt))
    return r1, r2


def remainder_diagnostics(stats: dict[float, tuple[float, float]]) -> RemainderReport:
    """Log-log slopes of the remainder statistics over an epsilon sweep."""
    eps = np.array(sorted(stats), dtype=float)
    r1 = np.array([stats[e][0] for e in eps])
    r2 = np.array([stats[e][1] for e in eps])

    def slope(v):
        pos = v > 0
        if pos.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(eps[pos]), np.log(v[pos]), 1)[0])

    return RemainderReport(eps, r1, r2, slope(r1), slope(r2))

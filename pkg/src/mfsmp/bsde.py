"""Regression-based backward solvers and BMO diagnostics.

Conditional expectations are least-squares projections on polynomials of the
current state. One joint design ``[phi, phi*dB, phi*(dB^2 - dt)]`` yields both
E_k[Y_{k+1}] and Z_k = E_k[Y_{k+1} dB_k] / dt; the last block is a control
variate that soaks up the Ito part of Y_{k+1} and lowers the variance of the
other two.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from . import _kernels
from .forward import ParticleEnsemble, SpikePlan
from .measure import EmpiricalMeasure, copy_mean
from .model import ControlProblem

RIDGE = 1e-10


class RegressionError(np.linalg.LinAlgError):
    pass


class PicardDivergence(RuntimeError):
    def __init__(self, msg, residual_log):
        super().__init__(f"{msg}; residual log: {residual_log}")
        self.residual_log = residual_log


class ClampError(RuntimeError):
    pass


# ------------------------------------------------------------- regression


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomials of degree <= ``degree`` in the state.

    With ``centered`` the basis is built from ``(x - mean) / std`` of the
    node's ensemble, i.e. it is augmented with the empirical mean of the state,
    which keeps the design well conditioned far from the origin.
    """

    degree: int = 3
    centered: bool = True

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("basis degree must be >= 1")

    @property
    def size(self) -> int:
        return self.degree + 1

    def standardiser(self, x: np.ndarray) -> tuple[float, float]:
        if not self.centered:
            return 0.0, 1.0
        c = float(np.mean(x))
        s = float(np.std(x))
        return c, (s if s > 1e-300 else 1.0)

    def features(self, x: np.ndarray, center: float = 0.0, scale: float = 1.0) -> np.ndarray:
        xi = (np.asarray(x, dtype=float) - center) / scale
        return np.vander(xi, self.degree + 1, increasing=True)


def _increment_weights(increments, dt) -> list[np.ndarray]:
    return [increments, increments * increments - dt]


class LeastSquares:
    """Ridge normal equations of a fixed design, factorised once.

    Columns are standardised by their RMS; all-zero columns (for instance the
    state powers at a deterministic initial node) are dropped.
    """

    def __init__(self, gram: np.ndarray, n: int):
        rms = np.sqrt(np.maximum(np.diag(gram), 0.0) / n)
        keep = rms > 1e-12 * max(1.0, float(rms.max()))
        p = int(keep.sum())
        if n < p:
            raise RegressionError(f"{n} samples cannot determine {p} basis coefficients")
        r = rms[keep]
        G = gram[np.ix_(keep, keep)] / np.outer(r, r)
        G[np.diag_indices_from(G)] += RIDGE * n
        try:
            self.L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise RegressionError("design matrix rank-deficient after ridge") from exc
        if np.min(np.diag(self.L)) ** 2 < RIDGE * n * 1e-3:  # pragma: no cover - defensive
            raise RegressionError("design matrix rank-deficient after ridge")
        self.keep = keep
        self.rms = rms
        self.size = gram.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Coefficients from the raw right-hand side ``A^T y``."""
        if not np.all(np.isfinite(rhs)):
            raise RegressionError("non-finite regression targets")
        r = self.rms[self.keep]
        c = np.linalg.solve(self.L.T, np.linalg.solve(self.L, rhs[self.keep] / r))
        coef = np.zeros(self.size)
        coef[self.keep] = c / r
        return coef


class NodeProjector:
    """Conditional-expectation operator at one node, reusable across targets.

    The design ``[phi, phi*dB, phi*(dB^2 - dt)]`` depends only on the states
    and increments, so its factorisation is computed once and every later fit
    costs one pass over the particles.
    """

    def __init__(self, states: np.ndarray, basis: RegressionBasis, increments: np.ndarray | None = None,
                 dt: float | None = None, weights: np.ndarray | None = None):
        if increments is not None and dt is None:
            raise ValueError("dt is required with increments")
        self.states = np.asarray(states, dtype=float)
        self.basis = basis
        self.center, self.scale = basis.standardiser(self.states)
        self.increments = None if increments is None else np.asarray(increments, dtype=float)
        self.dt = dt
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        phi = self.phi()
        cols = [phi] + [phi * m[:, None] for m in self.mult]
        A = np.hstack(cols)
        if self.weights is not None:
            A = A * np.sqrt(self.weights)[:, None]
        G = _kernels.xty(A, A)
        self.ls = LeastSquares(G, A.shape[0])

    @property
    def mult(self) -> list[np.ndarray]:
        return [] if self.increments is None else _increment_weights(self.increments, self.dt)

    def phi(self) -> np.ndarray:
        return self.basis.features(self.states, self.center, self.scale)

    def fit(self, values: np.ndarray) -> "RegressionFit":
        y = np.asarray(values, dtype=float)
        if y.shape != self.states.shape:
            raise ValueError(f"values shape {y.shape} != states shape {self.states.shape}")
        if self.weights is not None:
            y = y * self.weights
        phi = self.phi()
        mult = self.mult
        Ymat = np.column_stack([y] + [y * m for m in mult])
        rhs = _kernels.xty(phi, Ymat).T.reshape(-1)
        coef = self.ls.solve(rhs)
        d = self.basis.size
        cv = coef[:d]
        cz = coef[d:2 * d] if mult else None
        return RegressionFit(self.basis, self.center, self.scale, cv, cz, phi @ cv,
                             None if cz is None else phi @ cz)


@dataclass
class RegressionFit:
    basis: RegressionBasis
    center: float
    scale: float
    coef_value: np.ndarray
    coef_z: np.ndarray | None
    fitted: np.ndarray
    z: np.ndarray | None

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.basis.features(x, self.center, self.scale) @ self.coef_value

    def predict_z(self, x: np.ndarray) -> np.ndarray:
        if self.coef_z is None:
            raise ValueError("fit has no increment block")
        return self.basis.features(x, self.center, self.scale) @ self.coef_z


def regress_conditional(values: np.ndarray, states: np.ndarray, basis: RegressionBasis,
                        weights: np.ndarray | None = None, increments: np.ndarray | None = None,
                        dt: float | None = None) -> RegressionFit:
    """Least-squares estimate of E[values | state] (ridge 1e-10).

    Passing the Brownian increments of the cell also returns
    Z = E[values * dB | state] / dt per particle.
    """
    return NodeProjector(states, basis, increments, dt, weights).fit(values)


def node_projectors(ensemble: ParticleEnsemble, basis: RegressionBasis) -> list[NodeProjector]:
    """Per-cell projectors for an ensemble, cached on the ensemble object."""
    key = ("projectors", basis)
    cache = ensemble.cache
    if key not in cache:
        g = ensemble.grid
        cache[key] = [NodeProjector(ensemble.X[k], basis, ensemble.dB[k], g.dt) for k in range(g.steps)]
    return cache[key]


@dataclass
class PairFit:
    """Tensor-product fit of a pair-indexed value and its two martingale integrands."""

    basis: RegressionBasis
    center: float
    scale: float
    C_value: np.ndarray  # (d, d): value(x, xt) = phi(x) C phi(xt)
    C_zi: np.ndarray | None  # integrand against the own Brownian motion
    C_zj: np.ndarray | None  # integrand against the copy's Brownian motion

    def features(self, x):
        return self.basis.features(x, self.center, self.scale)

    def evaluate(self, C, x, xt) -> np.ndarray:
        return self.features(x) @ C @ self.features(xt).T

    def row_mean(self, C, x, xt, v) -> np.ndarray:
        """mean_j F(x_i, xt_j) v_j without forming the matrix."""
        Fj = self.features(xt)
        return self.features(x) @ (C @ (Fj.T @ np.asarray(v, dtype=float))) / Fj.shape[0]

    def col_mean(self, C, x, xt, v) -> np.ndarray:
        """mean_i F(x_i, xt_j) v_i, the starred pairing seen from j."""
        Fi = self.features(x)
        return self.features(xt) @ (C.T @ (Fi.T @ np.asarray(v, dtype=float))) / Fi.shape[0]


class PairProjector:
    """Conditional expectation for pair-indexed values on the tensor basis.

    Blocks of the design: 1, dB_i, dB_j, dB_i^2 - dt, dB_j^2 - dt, dB_i dB_j,
    each multiplying phi(x_i) phi(x_j)^T. The first three give the value and
    the integrands against the own and the copy Brownian motions.
    """

    def __init__(self, states: np.ndarray, basis: RegressionBasis, increments: np.ndarray | None = None,
                 dt: float | None = None):
        self.states = np.asarray(states, dtype=float)
        self.basis = basis
        self.center, self.scale = basis.standardiser(self.states)
        n = self.states.shape[0]
        one = np.ones(n)
        if increments is None:
            self.mult = [(one, one)]
        else:
            b = np.asarray(increments, dtype=float)
            ito = b * b - dt
            self.mult = [(one, one), (b, one), (one, b), (ito, one), (one, ito), (b, b)]
        phi = self.phi()
        T = np.hstack([_kernels.tensor_design(phi * wi[:, None], phi * wj[:, None]) for wi, wj in self.mult])
        self.ls = LeastSquares(_kernels.xty(T, T), n * n)

    def phi(self) -> np.ndarray:
        return self.basis.features(self.states, self.center, self.scale)

    def fit(self, values: np.ndarray):
        """Returns the fit plus fitted value, own and copy integrands on the pair grid."""
        V = np.asarray(values, dtype=float)
        phi = self.phi()
        d = self.basis.size
        rhs = []
        for wi, wj in self.mult:
            left = phi * wi[:, None]
            right = phi * wj[:, None]
            rhs.append(_kernels.xty(left, _kernels.xty(V.T, right)).reshape(-1))
        coef = self.ls.solve(np.concatenate(rhs))
        q = d * d
        Cs = [coef[m * q:(m + 1) * q].reshape(d, d) for m in range(min(3, len(self.mult)))]
        fit = PairFit(self.basis, self.center, self.scale, Cs[0],
                      Cs[1] if len(Cs) > 1 else None, Cs[2] if len(Cs) > 2 else None)
        out = [phi @ C @ phi.T for C in Cs]
        while len(out) < 3:
            out.append(None)
        return (fit, *out)


def regress_pair(values: np.ndarray, states: np.ndarray, basis: RegressionBasis,
                 dBi: np.ndarray | None = None, dt: float | None = None):
    """One-off pair regression; see :class:`PairProjector`."""
    return PairProjector(states, basis, dBi, dt).fit(values)


# ---------------------------------------------------------- backward solvers


@dataclass
class BackwardSolution:
    Y: np.ndarray  # (steps + 1, N)
    Z: np.ndarray  # (steps, N)
    residual_log: list[float]
    z_second_moments: np.ndarray  # (steps,)
    fits: list[RegressionFit] = field(default_factory=list)
    z_cap: float | None = None
    clamp_fraction: float = 0.0
    y_bound: float = 0.0

    @property
    def Y0(self) -> float:
        return float(np.mean(self.Y[0]))

    @property
    def sweeps(self) -> int:
        return len(self.residual_log)


Coefficient = float | np.ndarray | Callable[[int], np.ndarray]


def _at(c: Coefficient, k: int):
    """Coefficient value at node ``k``: scalar, per-node vector, node-by-particle array or callable."""
    if callable(c):
        return c(k)
    a = np.asarray(c, dtype=float)
    if a.ndim == 0:
        return float(a)
    return a[k]


def _is_zero(c) -> bool:
    return not callable(c) and np.ndim(c) == 0 and float(c) == 0.0


def _kernel_mean(K, v):
    if np.ndim(K) == 0:
        return float(K) * float(np.mean(v))
    if np.ndim(K) == 1:  # per-particle weight on the copy mean
        return np.asarray(K) * float(np.mean(v))
    return copy_mean(K, v)


def solve_linear_mf_bsde(ensemble: ParticleEnsemble, xi: np.ndarray, rho: Coefficient = 0.0,
                         varpi: Coefficient = 0.0, rho_pair: Coefficient = 0.0, phi: Coefficient = 0.0,
                         basis: RegressionBasis | None = None, picard_tol: float = 1e-10,
                         picard_max: int = 100, keep_fits: bool = False) -> BackwardSolution:
    """Linear mean-field BSDE

        -dY = (rho Y + varpi Z + E~[rho' Y~] + phi) dt - Z dB,   Y_T = xi,

    by backward Euler implicit in Y, with Picard sweeps on the copy term
    (initialised with the terminal mean). ``rho_pair`` is a kernel in the
    broadcast form of :func:`mfsmp.measure.copy_mean` (per node, or a callable).
    """
    basis = basis or RegressionBasis()
    g = ensemble.grid
    n = ensemble.n_particles
    dt = g.dt
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (n,))
    mean_field = not _is_zero(rho_pair)
    proj = node_projectors(ensemble, basis)
    Yprev = np.full((g.steps + 1, n), float(np.mean(xi)))
    log: list[float] = []
    for sweep in range(picard_max):
        Y = np.empty((g.steps + 1, n))
        Z = np.empty((g.steps, n))
        Y[-1] = xi
        fits = []
        for k in range(g.steps - 1, -1, -1):
            fit = proj[k].fit(Y[k + 1])
            z = fit.z
            src = _at(phi, k)
            if mean_field:
                src = src + _kernel_mean(_at(rho_pair, k), Yprev[k])
            Y[k] = (fit.fitted + (_at(varpi, k) * z + src) * dt) / (1.0 - _at(rho, k) * dt)
            Z[k] = z
            if keep_fits:
                fits.append(fit)
        change = float(np.max(np.abs(Y - Yprev)))
        if not np.isfinite(change):
            raise PicardDivergence("non-finite iterate", log)
        log.append(change)
        Yprev = Y
        if not mean_field or change < picard_tol:
            break
    else:
        raise PicardDivergence(f"no convergence in {picard_max} sweeps", log)
    fits.reverse()
    return BackwardSolution(Y, Z, log, np.mean(Z * Z, axis=1), fits, y_bound=float(np.max(np.abs(Y))))


def _implicit_step(fn, yhat, tol=1e-12, max_iter=50):
    """Solve y = yhat + fn(y) by (damped) fixed-point iteration."""
    y = yhat.copy()
    damp = 1.0
    last = np.inf
    for _ in range(max_iter):
        new = yhat + fn(y)
        change = float(np.max(np.abs(new - y)))
        y = y + damp * (new - y)
        if change < tol:
            break
        if change > last:
            damp *= 0.5
        last = change
    return y


def solve_quadratic_mf_bsde(problem: ControlProblem, ensemble: ParticleEnsemble,
                            basis: RegressionBasis | None = None, z_cap: float | None = None,
                            picard_tol: float = 1e-10, picard_max: int = 100,
                            strict: bool = False, clamp_tolerance: float = 1e-3,
                            keep_fits: bool = False) -> BackwardSolution:
    """Backward component of the controlled system with a quadratic generator.

    The z-argument of the generator is clamped to ``[-z_cap, z_cap]``; by
    default ``z_cap`` is ten times the 99.9% quantile of |Z| from a first
    unclamped sweep. The joint law of (X, Y) in the generator uses the previous
    Picard sweep's Y. If the clamp is active on more than ``clamp_tolerance``
    of the (node, particle) pairs at convergence a warning is issued, or
    :class:`ClampError` in strict mode.
    """
    basis = basis or RegressionBasis()
    g = ensemble.grid
    n = ensemble.n_particles
    dt = g.dt
    XT = ensemble.X[-1]
    xi = np.asarray(problem.terminal(XT, ensemble.law(g.steps)), dtype=float)
    xi = np.broadcast_to(xi, (n,)).copy()
    Yprev = np.full((g.steps + 1, n), float(np.mean(xi)))
    proj = node_projectors(ensemble, basis)
    cap = z_cap
    log: list[float] = []
    for sweep in range(picard_max):
        Y = np.empty((g.steps + 1, n))
        Z = np.empty((g.steps, n))
        Y[-1] = xi
        fits = []
        for k in range(g.steps - 1, -1, -1):
            t, x, u = g.nodes[k], ensemble.X[k], ensemble.u[k]
            fit = proj[k].fit(Y[k + 1])
            z = fit.z
            zc = z if cap is None else np.clip(z, -cap, cap)
            law2 = EmpiricalMeasure(np.column_stack([x, Yprev[k]]))
            Y[k] = _implicit_step(lambda y: problem.generator(t, x, y, zc, law2, u) * dt, fit.fitted)
            Z[k] = z
            if keep_fits:
                fits.append(fit)
        if not np.all(np.isfinite(Y)):
            raise PicardDivergence("non-finite iterate", log)
        change = float(np.max(np.abs(Y - Yprev)))
        log.append(change)
        Yprev = Y
        if cap is None:
            q = float(np.quantile(np.abs(Z), 0.999))
            cap = 10.0 * q if q > 0 else np.inf
            continue
        if change < picard_tol:
            break
    else:
        raise PicardDivergence(f"no convergence in {picard_max} sweeps", log)
    fits.reverse()
    frac = float(np.mean(np.abs(Z) > cap))
    if frac > clamp_tolerance:
        msg = f"z clamp active on {frac:.3%} of node/particle pairs (cap {cap:.4g})"
        if strict:
            raise ClampError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return BackwardSolution(Y, Z, log, np.mean(Z * Z, axis=1), fits, cap, frac,
                            float(np.max(np.abs(Y))))


# ------------------------------------------------------ along-trajectory data


@dataclass
class GeneratorPath:
    """Generator and its derivatives along (X*, Y*, Z*, u*), per cell."""

    f: np.ndarray
    f_x: np.ndarray
    f_y: np.ndarray
    f_z: np.ndarray
    hess: list  # per node: (xx, xy, xz, yy, yz, zz)
    f_mu_x: list  # kernels K[i, j]
    f_mu_y: list
    f_mu_jac: list  # per node: 4 kernels


def generator_path(problem: ControlProblem, ensemble: ParticleEnsemble, sol: BackwardSolution,
                   rows: slice | np.ndarray | None = None) -> GeneratorPath:
    """Evaluate f and its derivatives at every cell.

    ``rows`` restricts the own index to a subset (the copy index always runs
    over the rows too, so kernels are square on that subset) while the laws
    stay those of the full ensemble.
    """
    d = problem.derivatives
    g = ensemble.grid
    sel = slice(None) if rows is None else rows
    out = {k: [] for k in ("f", "f_x", "f_y", "f_z", "hess", "f_mu_x", "f_mu_y", "f_mu_jac")}
    for k in range(g.steps):
        t = g.nodes[k]
        X, Y, Z, U = ensemble.X[k], sol.Y[k], sol.Z[k], ensemble.u[k]
        law2 = EmpiricalMeasure(np.column_stack([X, Y]))
        x, y, z, u = X[sel], Y[sel], Z[sel], U[sel]
        out["f"].append(problem.generator(t, x, y, z, law2, u))
        out["f_x"].append(d.f_x(t, x, y, z, law2, u))
        out["f_y"].append(d.f_y(t, x, y, z, law2, u))
        out["f_z"].append(d.f_z(t, x, y, z, law2, u))
        out["hess"].append(d.f_hess(t, x, y, z, law2, u))
        args = (t, x[:, None], y[:, None], z[:, None], law2, u[:, None], x[None, :], y[None, :])
        fx, fy = d.f_mu(*args)
        out["f_mu_x"].append(fx)
        out["f_mu_y"].append(fy)
        out["f_mu_jac"].append(d.f_mu_jac(*args))
    n = len(out["f"][0]) if np.ndim(out["f"][0]) else ensemble.n_particles
    for key in ("f", "f_x", "f_y", "f_z"):
        out[key] = np.array([np.broadcast_to(v, (n,)) for v in out[key]])
    return GeneratorPath(**out)


def delta_f(problem: ControlProblem, ensemble: ParticleEnsemble, sol: BackwardSolution,
            p1: np.ndarray, spike: SpikePlan) -> np.ndarray:
    """f(X*, Y*, Z* + p1 dsigma, nu*, u) - f(X*, Y*, Z*, nu*, u*) on the spike cells."""
    g = ensemble.grid
    out = np.zeros((g.steps, ensemble.n_particles))
    for k in np.flatnonzero(spike.effective_set):
        t = g.nodes[k]
        X, Y, Z = ensemble.X[k], sol.Y[k], sol.Z[k]
        law = ensemble.law(k)
        law2 = EmpiricalMeasure(np.column_stack([X, Y]))
        ua, us = spike.u_alt[k], spike.u_star[k]
        ds = problem.diffusion(t, X, law, ua) - problem.diffusion(t, X, law, us)
        out[k] = (problem.generator(t, X, Y, Z + p1[k] * ds, law2, ua)
                  - problem.generator(t, X, Y, Z, law2, us))
    return out


def solve_expansion_bsde(problem: ControlProblem, ensemble: ParticleEnsemble, sol: BackwardSolution,
                         p1: np.ndarray, spike: SpikePlan, alpha1: np.ndarray,
                         basis: RegressionBasis | None = None, gen: GeneratorPath | None = None,
                         picard_tol: float = 1e-12, picard_max: int = 100) -> BackwardSolution:
    """BSDE for the first-order cost perturbation with source (alpha1 + delta f) on the spike set.

    ``alpha1`` has shape ``(steps, N)``; coefficients are f_y, f_z and the
    pair kernel f_mu_y along the optimal solve; terminal value 0.
    """
    if spike.is_trivial:
        g = ensemble.grid
        n = ensemble.n_particles
        return BackwardSolution(np.zeros((g.steps + 1, n)), np.zeros((g.steps, n)), [0.0],
                                np.zeros(g.steps))
    gen = gen or generator_path(problem, ensemble, sol)
    source = (np.asarray(alpha1) + delta_f(problem, ensemble, sol, p1, spike)) * spike.indicator()[:, None]
    return solve_linear_mf_bsde(ensemble, 0.0, rho=gen.f_y, varpi=gen.f_z,
                                rho_pair=lambda k: gen.f_mu_y[k], phi=source, basis=basis,
                                picard_tol=picard_tol, picard_max=picard_max)


# ------------------------------------------------------------------ BMO


def psi(x):
    """Psi(x) = (1 + log((2x - 1) / (2(x - 1))) / x)^(1/2) - 1 on (1, inf)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 1):
        raise ValueError("Psi is defined on (1, inf)")
    return np.sqrt(1.0 + np.log((2 * x - 1) / (2 * (x - 1))) / x) - 1.0


def p_of_bmo(norm: float, tol: float = 1e-14) -> float:
    """Solve Psi(p) = norm for p in (1, inf) by bisection (Psi is decreasing)."""
    if norm <= 0:
        return math.inf
    lo, hi = 1.0 + 1e-12, 2.0
    while psi(lo) < norm:  # pragma: no cover - only for norms beyond Psi(1 + 1e-12)
        lo = 1.0 + (lo - 1.0) * 1e-3
        if lo - 1.0 < 1e-300:
            raise ValueError(f"BMO norm {norm} too large to invert Psi")
    while psi(hi) > norm:
        hi *= 2.0
    return float(brentq(lambda p: float(psi(p)) - norm, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps,
                        maxiter=500))


def reverse_holder_constant(p: float, norm: float) -> float:
    """K(p, ||M||) from the reverse Hoelder inequality; +inf when the bracket is not positive."""
    inner = 1.0 - (2 * p - 2) / (2 * p - 1) * math.exp(p * p * (norm * norm + 2 * norm))
    return 2.0 / inner if inner > 0 else math.inf


@dataclass
class BmoReport:
    bmo2_squared: float
    bmo2_estimate: float
    p_M: float
    p: float
    K: float
    energy_check: dict[int, tuple[float, float]]
    n_particles: int

    @property
    def energy_ok(self) -> bool:
        return all(lhs <= rhs * (1 + 1e-12) + 1e-300 for lhs, rhs in self.energy_check.values())

    def as_dict(self) -> dict:
        return {
            "bmo2_squared": self.bmo2_squared, "bmo2_estimate": self.bmo2_estimate,
            "p_M": self.p_M, "p": self.p, "K": self.K, "n_particles": self.n_particles,
            "energy_check": {str(n): {"moment": a, "bound": b} for n, (a, b) in self.energy_check.items()},
            "energy_ok": self.energy_ok,
        }


def bmo_diagnostics(Z: np.ndarray, dt: float, states: np.ndarray | None = None,
                    basis: RegressionBasis | None = None) -> BmoReport:
    """Estimate ||Z.B||_BMO2 and the derived reverse-Hoelder exponents.

    For each grid time tau the conditional expectation of the remaining
    bracket sum_{s >= tau} Z_s^2 dt is regressed on ``states[tau]`` (or taken
    pathwise without states) and the empirical max over particles and nodes is
    reported. The estimate is biased low: it cannot see beyond the sample.
    """
    Z = np.asarray(Z, dtype=float)
    steps, n = Z.shape
    tail = np.cumsum((Z * Z)[::-1] * dt, axis=0)[::-1]  # tail[k] = sum_{l >= k}
    basis = basis or RegressionBasis(degree=2)
    best = 0.0
    for k in range(steps):
        if states is None:
            cond = tail[k]
        else:
            cond = regress_conditional(tail[k], states[k], basis).fitted
        best = max(best, float(np.max(cond)))
    norm = math.sqrt(best)
    pM = p_of_bmo(norm)
    p = (1.0 + pM) / 2.0 if math.isfinite(pM) else math.inf
    K = reverse_holder_constant(p, norm) if math.isfinite(p) else 1.0
    bracket = tail[0]
    energy = {m: (float(np.mean(bracket ** m)), math.factorial(m) * norm ** (2 * m)) for m in (1, 2, 3)}
    return BmoReport(best, norm, pM, p, K, energy, n)

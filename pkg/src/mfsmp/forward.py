"""Interacting-particle simulation of the controlled state, spike variations,
and the first/second-order variational equations.

Brownian increments come from one counter-based stream per particle (Philox
keyed by ``(seed, particle)``), so any prefix of an ensemble is itself a valid
ensemble and results never depend on how work is split.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .measure import EmpiricalMeasure, copy_mean
from .model import ControlProblem


class ForwardOverflowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("step count must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def __len__(self) -> int:
        return self.steps + 1


def particle_stream(seed: int, particle: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, particle], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(seed: int, n_particles: int, grid: TimeGrid,
                        base_steps: int | None = None) -> np.ndarray:
    """Increments of shape ``(steps, n_particles)``.

    With ``base_steps`` (a multiple of ``grid.steps``) the path is drawn on the
    finer base grid and summed, so grids sharing a base see the same Brownian
    path.
    """
    base = grid.steps if base_steps is None else int(base_steps)
    if base % grid.steps:
        raise ValueError(f"base_steps={base} is not a multiple of {grid.steps}")
    ratio = base // grid.steps
    scale = np.sqrt(grid.horizon / base)
    out = np.empty((grid.steps, n_particles))
    for i in range(n_particles):
        z = particle_stream(seed, i).standard_normal(base) * scale
        out[:, i] = z.reshape(grid.steps, ratio).sum(axis=1) if ratio > 1 else z
    return out


@dataclass
class ParticleEnsemble:
    grid: TimeGrid
    dB: np.ndarray  # (steps, N)
    X: np.ndarray  # (steps + 1, N)
    u: np.ndarray  # (steps, N), the control used on [t_k, t_k+1)
    seed: int
    meta: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_particles(self) -> int:
        return self.X.shape[1]

    def law(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.X[k])

    def u_at(self, k: int) -> np.ndarray:
        """Control at node ``k``; the terminal node reuses the last cell."""
        return self.u[min(k, self.grid.steps - 1)]


ControlLike = np.ndarray | float | Callable[[float, np.ndarray], np.ndarray]


def control_path(control: ControlLike, grid: TimeGrid, X: np.ndarray | None = None,
                 k: int | None = None, n: int | None = None) -> np.ndarray:
    """Resolve a control specification at node ``k`` (or all nodes for arrays).

    Accepted forms: scalar, per-node array ``(steps,)``, full array
    ``(steps, N)``, or a feedback ``control(t, x)`` evaluated on the states.
    """
    if callable(control):
        if k is None:
            raise ValueError("feedback controls are resolved node by node")
        return np.broadcast_to(np.asarray(control(grid.nodes[k], X), dtype=float), X.shape).copy()
    arr = np.asarray(control, dtype=float)
    if arr.ndim == 0:
        full = np.full((grid.steps, n), float(arr))
    elif arr.ndim == 1:
        if arr.shape[0] != grid.steps:
            raise ValueError(f"per-node control needs {grid.steps} entries, got {arr.shape[0]}")
        full = np.repeat(arr[:, None], n, axis=1)
    else:
        if arr.shape != (grid.steps, n):
            raise ValueError(f"control shape {arr.shape} != {(grid.steps, n)}")
        full = arr
    return full if k is None else full[k]


def _check_finite(arr, k, label="state"):
    bad = ~np.isfinite(arr)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ForwardOverflowError(f"non-finite {label} at node {k}, particle {i}")


def simulate_forward(problem: ControlProblem, control: ControlLike, grid: TimeGrid,
                     n_particles: int, seed: int, dB: np.ndarray | None = None,
                     base_steps: int | None = None) -> ParticleEnsemble:
    """Euler-Maruyama for the particle system with empirical-law coefficients."""
    if dB is None:
        dB = brownian_increments(seed, n_particles, grid, base_steps)
    elif dB.shape != (grid.steps, n_particles):
        raise ValueError(f"increments have shape {dB.shape}")
    X = np.empty((grid.steps + 1, n_particles))
    U = np.empty((grid.steps, n_particles))
    X[0] = problem.initial_state
    dt = grid.dt
    fixed = None if callable(control) else control_path(control, grid, n=n_particles)
    for k in range(grid.steps):
        t = grid.nodes[k]
        x = X[k]
        u = control_path(control, grid, x, k) if fixed is None else fixed[k]
        law = EmpiricalMeasure(x)
        X[k + 1] = x + problem.drift(t, x, law, u) * dt + problem.diffusion(t, x, law, u) * dB[k]
        U[k] = u
        _check_finite(X[k + 1], k + 1)
    return ParticleEnsemble(grid, dB, X, U, seed,
                            meta={"problem": problem.name, "N_p": n_particles, "N_t": grid.steps})


# ------------------------------------------------------------------ spikes


@dataclass
class SpikePlan:
    u_star: np.ndarray  # (steps, N)
    u_alt: np.ndarray
    epsilon: float  # requested
    epsilon_rounded: float  # multiple of dt actually used for the window
    window_start: float
    M: float
    window: np.ndarray  # bool (steps,), cells inside [t0, t0 + eps)
    effective_set: np.ndarray  # window intersected with Gamma_M
    dt: float

    @property
    def is_trivial(self) -> bool:
        return not bool(self.effective_set.any())

    @property
    def measure(self) -> float:
        return float(self.effective_set.sum() * self.dt)

    @property
    def u_eps(self) -> np.ndarray:
        return np.where(self.effective_set[:, None], self.u_alt, self.u_star)

    def indicator(self) -> np.ndarray:
        return self.effective_set.astype(float)


def gamma_m_mask(z_second_moments: np.ndarray, M: float) -> np.ndarray:
    return np.asarray(z_second_moments, dtype=float) <= M


def make_spike(u_star: np.ndarray, u_alt: np.ndarray, t0: float, epsilon: float,
               z_second_moments: np.ndarray, M: float, grid: TimeGrid) -> SpikePlan:
    """Spike window ``[t0, t0 + eps)`` on whole grid cells, restricted to Gamma_M.

    ``eps`` is rounded to a multiple of ``dt``; ``z_second_moments`` holds
    E|Z*|^2 per cell (a trailing terminal entry is ignored).
    """
    if not 0 <= t0 < grid.horizon:
        raise ValueError("window start must lie in [0, T)")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    u_star = np.asarray(u_star, dtype=float)
    u_alt = np.broadcast_to(np.asarray(u_alt, dtype=float), u_star.shape).copy()
    dt = grid.dt
    n_cells = int(np.floor(epsilon / dt + 1e-9))
    k0 = int(np.floor(t0 / dt + 1e-9))
    window = np.zeros(grid.steps, dtype=bool)
    window[k0:min(k0 + n_cells, grid.steps)] = True
    z2 = np.asarray(z_second_moments, dtype=float)[: grid.steps]
    if z2.shape[0] != grid.steps:
        raise ValueError("need one second moment per grid cell")
    effective = window & gamma_m_mask(z2, M)
    return SpikePlan(u_star, u_alt, float(epsilon), n_cells * dt, k0 * dt, float(M),
                     window, effective, dt)


# ------------------------------------------------------- variational equations


@dataclass
class LinearisedCoefficients:
    """Coefficient derivatives along (X*, u*) and the spike differences, per node."""

    b_x: list
    b_xx: list
    sigma_x: list
    sigma_xx: list
    b_mu: list  # kernels K[i, j] in broadcast form
    b_xmu: list
    sigma_mu: list
    sigma_xmu: list
    delta_b: np.ndarray  # (steps, N): b(u_alt) - b(u*)
    delta_sigma: np.ndarray
    delta_sigma_x: np.ndarray


def linearise_forward(problem: ControlProblem, ensemble: ParticleEnsemble,
                      u_alt: np.ndarray | None = None) -> LinearisedCoefficients:
    d = problem.derivatives
    g = ensemble.grid
    n = ensemble.n_particles
    out = {k: [] for k in ("b_x", "b_xx", "sigma_x", "sigma_xx", "b_mu", "b_xmu", "sigma_mu", "sigma_xmu")}
    db = np.zeros((g.steps, n))
    ds = np.zeros((g.steps, n))
    dsx = np.zeros((g.steps, n))
    for k in range(g.steps):
        t, x, u = g.nodes[k], ensemble.X[k], ensemble.u[k]
        law = ensemble.law(k)
        xi, xj = x[:, None], x[None, :]
        ui = u[:, None]
        out["b_x"].append(d.b_x(t, x, law, u))
        out["b_xx"].append(d.b_xx(t, x, law, u))
        out["sigma_x"].append(d.sigma_x(t, x, law, u))
        out["sigma_xx"].append(d.sigma_xx(t, x, law, u))
        out["b_mu"].append(d.b_mu(t, xi, law, ui, xj))
        out["b_xmu"].append(d.b_xmu(t, xi, law, ui, xj))
        out["sigma_mu"].append(d.sigma_mu(t, xi, law, ui, xj))
        out["sigma_xmu"].append(d.sigma_xmu(t, xi, law, ui, xj))
        if u_alt is not None:
            ua = u_alt[k]
            db[k] = problem.drift(t, x, law, ua) - problem.drift(t, x, law, u)
            ds[k] = problem.diffusion(t, x, law, ua) - problem.diffusion(t, x, law, u)
            dsx[k] = d.sigma_x(t, x, law, ua) - d.sigma_x(t, x, law, u)
    return LinearisedCoefficients(**out, delta_b=db, delta_sigma=ds, delta_sigma_x=dsx)


def _lin(problem, ensemble, spike, lin):
    if lin is None:
        lin = linearise_forward(problem, ensemble, spike.u_alt)
    return lin


def simulate_variational1(problem: ControlProblem, ensemble: ParticleEnsemble, spike: SpikePlan,
                          lin: LinearisedCoefficients | None = None) -> np.ndarray:
    """First-order variation X^1, shape ``(steps + 1, N)``, on the ensemble's increments."""
    lin = _lin(problem, ensemble, spike, lin)
    g = ensemble.grid
    ind = spike.indicator()
    X1 = np.zeros_like(ensemble.X)
    for k in range(g.steps):
        x1 = X1[k]
        drift = lin.b_x[k] * x1 + copy_mean(lin.b_mu[k], x1)
        vol = lin.sigma_x[k] * x1 + copy_mean(lin.sigma_mu[k], x1) + lin.delta_sigma[k] * ind[k]
        X1[k + 1] = x1 + drift * g.dt + vol * ensemble.dB[k]
        _check_finite(X1[k + 1], k + 1, "first-order variation")
    return X1


def simulate_variational2(problem: ControlProblem, ensemble: ParticleEnsemble, spike: SpikePlan,
                          X1: np.ndarray, lin: LinearisedCoefficients | None = None) -> np.ndarray:
    """Second-order variation X^2 driven by X^1 and the spike differences."""
    lin = _lin(problem, ensemble, spike, lin)
    g = ensemble.grid
    ind = spike.indicator()
    X2 = np.zeros_like(ensemble.X)
    for k in range(g.steps):
        x1, x2 = X1[k], X2[k]
        sq = x1 * x1
        drift = (lin.b_x[k] * x2 + copy_mean(lin.b_mu[k], x2) + 0.5 * lin.b_xx[k] * sq
                 + 0.5 * copy_mean(lin.b_xmu[k], sq) + lin.delta_b[k] * ind[k])
        vol = (lin.sigma_x[k] * x2 + copy_mean(lin.sigma_mu[k], x2) + 0.5 * lin.sigma_xx[k] * sq
               + 0.5 * copy_mean(lin.sigma_xmu[k], sq) + lin.delta_sigma_x[k] * x1 * ind[k])
        X2[k + 1] = x2 + drift * g.dt + vol * ensemble.dB[k]
        _check_finite(X2[k + 1], k + 1, "second-order variation")
    return X2


def sup_moment(paths: np.ndarray, p: float = 2.0) -> float:
    """E[sup_t |path_t|^p] over the ensemble."""
    return float(np.mean(np.max(np.abs(paths), axis=0) ** p))


# ------------------------------------------------------------- Prop-style check


@dataclass
class ThetaTable:
    epsilon: np.ndarray
    integral: np.ndarray
    slope: float

    def ratios(self) -> np.ndarray:
        return self.integral / self.epsilon


def squared_mean_unbiased(w: np.ndarray) -> float:
    """Unbiased estimate of (E W)^2 from i.i.d.-like samples (U-statistic)."""
    n = w.shape[0]
    s = w.sum()
    return float((s * s - np.dot(w, w)) / (n * (n - 1)))


def prop42_check(theta: np.ndarray, X1_by_eps: Mapping[float, np.ndarray], dt: float,
                 unbiased: bool = True) -> ThetaTable:
    """Integral over t of |E[theta_t X^1_t]|^2 for each epsilon, plus the log-log slope.

    ``theta`` and each ``X1`` have shape ``(steps + 1, N)``; the time integral
    uses left-point cells. The squared mean is estimated by a U-statistic so the
    O(1/N) positive bias of the plain square does not flatten the slope.
    """
    eps = np.array(sorted(X1_by_eps), dtype=float)
    vals = np.empty(eps.size)
    for n, e in enumerate(eps):
        W = theta[:-1] * X1_by_eps[e][:-1]
        if unbiased:
            sq = np.array([squared_mean_unbiased(w) for w in W])
        else:
            sq = W.mean(axis=1) ** 2
        vals[n] = float(np.sum(sq) * dt)
    pos = vals > 0
    slope = float(np.polyfit(np.log(eps[pos]), np.log(vals[pos]), 1)[0]) if pos.sum() >= 2 else float("nan")
    return ThetaTable(eps, vals, slope)


# ------------------------------------------------------- variational sweeps


def terminal_expansion_residual(problem: ControlProblem, ensemble: ParticleEnsemble, X_eps_T: np.ndarray,
                                X1_T: np.ndarray, X2_T: np.ndarray) -> np.ndarray:
    """Per-particle remainder of the second-order expansion of the terminal cost."""
    d = problem.derivatives
    xT = ensemble.X[-1]
    law = ensemble.law(ensemble.grid.steps)
    xi, xj = xT[:, None], xT[None, :]
    s = X1_T + X2_T
    sq = X1_T * X1_T
    return (problem.terminal(X_eps_T, EmpiricalMeasure(X_eps_T)) - problem.terminal(xT, law)
            - d.phi_x(xT, law) * s - copy_mean(d.phi_mu(xi, law, xj), s)
            - 0.5 * d.phi_xx(xT, law) * sq - 0.5 * copy_mean(d.phi_xmu(xi, law, xj), sq))


VARIATIONAL_STATISTICS = ("state_gap", "X1", "X2", "first_order_gap", "second_order_gap", "terminal")


@dataclass
class VariationalSweep:
    """Second moments over an epsilon sweep sharing one set of Brownian increments.

    Columns: E sup|X^e - X*|^p, E sup|X^1|^p, E sup|X^2|^p, E sup|X^e - X* - X^1|^p,
    E sup|X^e - X* - X^1 - X^2|^p and the mean square terminal-cost remainder.
    """

    epsilon: np.ndarray
    table: dict
    theta: ThetaTable

    def slope(self, name: str) -> float:
        v = np.asarray(self.table[name], dtype=float)
        ok = v > 0
        return float(np.polyfit(np.log(self.epsilon[ok]), np.log(v[ok]), 1)[0])


def variational_sweep(problem: ControlProblem, ensemble: ParticleEnsemble, u_alt, t0: float,
                      epsilons: Sequence[float], z_second_moments: np.ndarray | None = None,
                      M: float = np.inf, p: float = 2.0) -> VariationalSweep:
    g = ensemble.grid
    z2 = np.zeros(g.steps) if z_second_moments is None else z_second_moments
    ua = np.broadcast_to(np.asarray(u_alt, dtype=float), ensemble.u.shape)
    table = {k: [] for k in VARIATIONAL_STATISTICS}
    X1s = {}
    used = []
    for eps in epsilons:
        sp = make_spike(ensemble.u, ua, t0, eps, z2, M, g)
        lin = linearise_forward(problem, ensemble, sp.u_alt)
        X1 = simulate_variational1(problem, ensemble, sp, lin)
        X2 = simulate_variational2(problem, ensemble, sp, X1, lin)
        Xe = simulate_forward(problem, sp.u_eps, g, ensemble.n_particles, ensemble.seed, dB=ensemble.dB).X
        d = Xe - ensemble.X
        table["state_gap"].append(sup_moment(d, p))
        table["X1"].append(sup_moment(X1, p))
        table["X2"].append(sup_moment(X2, p))
        table["first_order_gap"].append(sup_moment(d - X1, p))
        table["second_order_gap"].append(sup_moment(d - X1 - X2, p))
        term = terminal_expansion_residual(problem, ensemble, Xe[-1], X1[-1], X2[-1])
        table["terminal"].append(float(np.mean(np.abs(term) ** p)))
        X1s[sp.epsilon_rounded] = X1
        used.append(sp.epsilon_rounded)
    theta = prop42_check(ensemble.X, X1s, g.dt)
    return VariationalSweep(np.array(used), {k: np.array(v) for k, v in table.items()}, theta)

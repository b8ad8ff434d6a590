"""Stochastic maximum principle: the Gamma process, the extended Hamiltonian,
the ensemble SMP test, the duality identity and the spike-variation sweep."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adjoint import (AdjointBundle, CopyOperator, OptimalSolve, alpha1 as alpha1_coefficient, assemble_M,
                      remainder_statistics, solve_adjoints, solve_optimal)
from .bsde import BackwardSolution, RegressionBasis, delta_f, solve_expansion_bsde, solve_quadratic_mf_bsde
from .forward import (SpikePlan, TimeGrid, _check_finite, gamma_m_mask, linearise_forward, make_spike,
                      simulate_forward, simulate_variational1, simulate_variational2)
from .measure import EmpiricalMeasure, copy_mean_t


# ------------------------------------------------------------------ Gamma


def solve_gamma(opt: OptimalSolve) -> np.ndarray:
    """dGamma = (f_y Gamma + E^[f*_mu_y Gamma^]) dt + f_z Gamma dB, Gamma_0 = 1."""
    ens, gen = opt.ensemble, opt.gen
    g = ens.grid
    G = np.ones_like(ens.X)
    for k in range(g.steps):
        gk = G[k]
        drift = gen.f_y[k] * gk + copy_mean_t(gen.f_mu_y[k], gk)
        G[k + 1] = gk + drift * g.dt + gen.f_z[k] * gk * ens.dB[k]
        _check_finite(G[k + 1], k + 1, "Gamma")
    return G


# -------------------------------------------------------------- Hamiltonian


def hamiltonian_H1(problem, t, x, law, u, u_star, p, q, P) -> np.ndarray:
    """p b(u) + q sigma(u) + P/2 (sigma(u) - sigma(u*))^2."""
    s = problem.diffusion(t, x, law, u)
    ds = s - problem.diffusion(t, x, law, u_star)
    return p * problem.drift(t, x, law, u) + q * s + 0.5 * P * ds * ds


@dataclass
class HamiltonianInputs:
    """Everything the extended Hamiltonian needs at one node."""

    t: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    u_star: np.ndarray
    law: EmpiricalMeasure
    law2: EmpiricalMeasure
    p1: np.ndarray
    q11: np.ndarray
    P1: np.ndarray
    p2: CopyOperator
    q22: CopyOperator
    P2: CopyOperator
    gamma: np.ndarray | None = None

    @classmethod
    def at(cls, opt: OptimalSolve, adj: AdjointBundle, k: int,
           gamma: np.ndarray | None = None) -> "HamiltonianInputs":
        ens = opt.ensemble
        x, y, z = ens.X[k], opt.backward.Y[k], opt.backward.Z[k]
        return cls(float(ens.grid.nodes[k]), x, y, z, ens.u[k], ens.law(k),
                   EmpiricalMeasure(np.column_stack([x, y])), adj.p1[k], adj.q11[k], adj.P1[k],
                   adj.p2.op(k, x), adj.q22.op(k, x), adj.P2.op(k, x),
                   None if gamma is None else gamma[k])


def reduced_hamiltonian(problem, h: HamiltonianInputs, u) -> np.ndarray:
    """H1 plus the generator with the shifted integrand, without copy terms."""
    u = np.broadcast_to(np.asarray(u, dtype=float), h.x.shape)
    ds = problem.diffusion(h.t, h.x, h.law, u) - problem.diffusion(h.t, h.x, h.law, h.u_star)
    own = hamiltonian_H1(problem, h.t, h.x, h.law, u, h.u_star, h.p1, h.q11, h.P1)
    return own + problem.generator(h.t, h.x, h.y, h.z + h.p1 * ds, h.law2, u)


def hamiltonian_full(problem, h: HamiltonianInputs, u, u_copy=None) -> np.ndarray:
    """Extended Hamiltonian per particle.

    ``u_copy`` is the candidate seen at the copies (defaults to ``u``, which
    is right for a candidate given as a function of the copy's own state).
    """
    u = np.broadcast_to(np.asarray(u, dtype=float), h.x.shape)
    uc = u if u_copy is None else np.broadcast_to(np.asarray(u_copy, dtype=float), h.x.shape)
    sc = problem.diffusion(h.t, h.x, h.law, uc)
    dsc = sc - problem.diffusion(h.t, h.x, h.law, h.u_star)
    copy = h.p2(problem.drift(h.t, h.x, h.law, uc)) + h.q22(sc) + 0.5 * h.P2(dsc * dsc)
    ds = problem.diffusion(h.t, h.x, h.law, u) - problem.diffusion(h.t, h.x, h.law, h.u_star)
    own = hamiltonian_H1(problem, h.t, h.x, h.law, u, h.u_star, h.p1, h.q11, h.P1)
    return own + copy + problem.generator(h.t, h.x, h.y, h.z + h.p1 * ds, h.law2, u)


# ------------------------------------------------------------ candidates


@dataclass(frozen=True)
class Candidate:
    name: str
    fn: Callable[[float, np.ndarray, float], np.ndarray]  # (t, x, mean of x) -> control values

    def __call__(self, t, x, m):
        return np.broadcast_to(np.asarray(self.fn(t, x, m), dtype=float), np.shape(x))


def default_candidates(problem, horizon: float | None = None) -> list[Candidate]:
    """Constants, time switches and sign feedbacks built from the control set."""
    T = problem.horizon if horizon is None else horizon
    levels = np.asarray(problem.control_set.levels(), dtype=float)
    lo, hi = float(levels.min()), float(levels.max())
    out = [Candidate(f"const({v:g})", lambda t, x, m, v=float(v): v) for v in levels]
    for frac in (0.25, 0.5, 0.75):
        s = frac * T
        out.append(Candidate(f"switch({lo:g}->{hi:g}@{s:g})", lambda t, x, m, s=s: hi if t >= s else lo))
        out.append(Candidate(f"switch({hi:g}->{lo:g}@{s:g})", lambda t, x, m, s=s: lo if t >= s else hi))

    def sgn(a, b):
        return lambda t, x, m: np.where(x >= m, a, b)

    out.append(Candidate("sign+(x-m)", sgn(hi, lo)))
    out.append(Candidate("sign-(x-m)", sgn(lo, hi)))
    return out


# ---------------------------------------------------------------- SMP check


@dataclass
class SmpRow:
    node: int
    t: float
    candidate: str
    mean: float
    se: float
    in_gamma: dict

    @property
    def t_stat(self) -> float:
        return self.mean / self.se if self.se > 0 else (0.0 if self.mean == 0 else np.sign(self.mean) * np.inf)


@dataclass
class SmpReport:
    rows: list
    sigma: float
    M_values: tuple
    seed: int

    def violations(self, M: float | None = None) -> list[SmpRow]:
        return [r for r in self.rows if r.mean < -self.sigma * r.se
                and (M is None or r.in_gamma.get(M, False))]

    @property
    def passed(self) -> bool:
        return not self.violations()

    def min_t_stat(self) -> float:
        return min((r.t_stat for r in self.rows), default=0.0)

    def worst(self) -> SmpRow | None:
        return min(self.rows, key=lambda r: r.t_stat, default=None)

    def as_dict(self) -> dict:
        w = self.worst()
        return {"seed": self.seed, "sigma": self.sigma, "rows": len(self.rows),
                "violations": [(r.node, r.candidate, r.mean, r.se) for r in self.violations()],
                "worst": None if w is None else {"node": w.node, "t": w.t, "candidate": w.candidate,
                                                 "mean": w.mean, "se": w.se, "t_stat": w.t_stat}}


def smp_gaps(opt: OptimalSolve, adj: AdjointBundle, gamma: np.ndarray | None = None,
             candidates: Sequence[Candidate] | None = None, M_values=(np.inf,), sigma: float = 3.0,
             nodes=None) -> SmpReport:
    """Gamma (H(u) - H(u*)) per node of the union of Gamma_M and per candidate, on one ensemble."""
    problem = opt.problem
    g = opt.grid
    gamma = solve_gamma(opt) if gamma is None else gamma
    candidates = list(candidates or default_candidates(problem))
    z2 = opt.backward.z_second_moments
    masks = {M: gamma_m_mask(z2, M) for M in M_values}
    union = np.logical_or.reduce(list(masks.values()))
    nodes = np.flatnonzero(union) if nodes is None else np.asarray(nodes)
    N = opt.ensemble.n_particles
    rows = []
    for k in nodes:
        h = HamiltonianInputs.at(opt, adj, int(k), gamma)
        base = hamiltonian_full(problem, h, h.u_star)
        m = float(h.law.mean())
        for c in candidates:
            u = c(h.t, h.x, m)
            gap = h.gamma * (hamiltonian_full(problem, h, u) - base)
            rows.append(SmpRow(int(k), h.t, c.name, float(gap.mean()), float(gap.std(ddof=1) / np.sqrt(N)),
                               {M: bool(masks[M][k]) for M in M_values}))
    return SmpReport(rows, sigma, tuple(M_values), opt.ensemble.seed)


def persistent_violations(reports: Sequence[SmpReport]) -> list[tuple[int, str]]:
    """(node, candidate) pairs violating in every report."""
    sets = [{(r.node, r.candidate) for r in rep.violations()} for rep in reports]
    return sorted(set.intersection(*sets)) if sets else []


# ------------------------------------------------------------------ duality


@dataclass
class DualityReport:
    lhs: float  # Ybarbar_0
    rhs: float  # E[int Gamma (alpha1 + delta f) 1_E dt]
    rhs_se: float
    rhs_cv: float  # with the zero-mean martingale control variate removed
    rhs_cv_se: float

    @property
    def discrepancy(self) -> float:
        return self.lhs - self.rhs_cv

    def within(self, sigma: float = 3.0, bias: float = 0.0) -> bool:
        return abs(self.discrepancy) <= sigma * self.rhs_cv_se + bias


def duality_check(opt: OptimalSolve, adj: AdjointBundle, spike: SpikePlan, gamma: np.ndarray | None = None,
                  ybb: BackwardSolution | None = None, a1: np.ndarray | None = None) -> DualityReport:
    gamma = solve_gamma(opt) if gamma is None else gamma
    ens = opt.ensemble
    dt = ens.grid.dt
    lin = linearise_forward(opt.problem, ens, spike.u_alt)
    if a1 is None:
        a1 = alpha1_coefficient(opt, adj, spike, lin)
    src = (a1 + delta_f(opt.problem, ens, opt.backward, adj.p1, spike)) * spike.indicator()[:, None]
    if ybb is None:
        ybb = solve_expansion_bsde(opt.problem, ens, opt.backward, adj.p1, spike, a1, opt.basis, opt.gen)
    G = gamma[:-1]
    per = np.sum(G * src, axis=0) * dt
    mart = np.sum((G * ybb.Z + ybb.Y[:-1] * G * opt.gen.f_z) * ens.dB, axis=0)
    n = ens.n_particles
    cv = per - mart
    return DualityReport(float(ybb.Y0), float(per.mean()), float(per.std(ddof=1) / np.sqrt(n)),
                         float(cv.mean()), float(cv.std(ddof=1) / np.sqrt(n)))


# -------------------------------------------------------------- spike sweep


@dataclass
class SpikeResult:
    epsilon: float
    spike: SpikePlan
    expansion_residual: float  # E sup_t |Y^e - Y* - Y1 - Y2 - Ybb|^1.5
    first_order_residual: float  # E sup_t |Y^e - Y* - Ybb|^1.5 (no corrector), for contrast
    ybb_sup2: float  # E sup_t |Ybb|^2
    R1: float
    R2: float
    consistency_rms: float
    duality: DualityReport
    cost_gap: float  # Y^e_0 - Y*_0


@dataclass
class SpikeSweep:
    results: list = field(default_factory=list)

    @property
    def epsilon(self) -> np.ndarray:
        return np.array([r.epsilon for r in self.results])

    def series(self, attr: str) -> np.ndarray:
        return np.array([getattr(r, attr) for r in self.results], dtype=float)

    def slope(self, attr: str) -> float:
        e, v = self.epsilon, self.series(attr)
        ok = v > 0
        if ok.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(e[ok]), np.log(v[ok]), 1)[0])


def correctors(ens, adj: AdjointBundle, X1: np.ndarray, X2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First and second order value correctors built from the adjoints and variational states.

    Without law dependence the copy terms are exact zeros, so Y1 = p1 X1 and
    Y2 = p1 X2 + P1 (X1)^2 / 2 hold bit for bit.
    """
    Y1 = np.empty_like(X1)
    Y2 = np.empty_like(X1)
    for k in range(ens.grid.steps + 1):
        x = ens.X[k]
        p2, P2 = adj.p2.op(k, x), adj.P2.op(k, x)
        Y1[k] = adj.p1[k] * X1[k] + p2(X1[k])
        Y2[k] = adj.p1[k] * X2[k] + p2(X2[k]) + 0.5 * adj.P1[k] * X1[k] ** 2 + 0.5 * P2(X1[k] ** 2)
    return Y1, Y2


def spike_result(opt: OptimalSolve, adj: AdjointBundle, spike: SpikePlan, gamma: np.ndarray | None = None,
                 p: float = 1.5) -> SpikeResult:
    """All spike diagnostics for one window, on the optimal solve's Brownian increments."""
    problem, ens = opt.problem, opt.ensemble
    g = ens.grid
    gamma = solve_gamma(opt) if gamma is None else gamma
    lin = linearise_forward(problem, ens, spike.u_alt)
    X1 = simulate_variational1(problem, ens, spike, lin)
    X2 = simulate_variational2(problem, ens, spike, X1, lin)
    a1 = alpha1_coefficient(opt, adj, spike, lin)
    ybb = solve_expansion_bsde(problem, ens, opt.backward, adj.p1, spike, a1, opt.basis, opt.gen)
    ens_e = simulate_forward(problem, spike.u_eps, g, ens.n_particles, ens.seed, dB=ens.dB)
    sol_e = solve_quadratic_mf_bsde(problem, ens_e, opt.basis, z_cap=opt.backward.z_cap)
    Y1, Y2 = correctors(ens, adj, X1, X2)
    dY = sol_e.Y - opt.backward.Y
    res = dY - Y1 - Y2 - ybb.Y
    asm = assemble_M(opt, adj, X1, X2, spike, lin)
    r1, r2 = remainder_statistics(asm)
    return SpikeResult(
        spike.epsilon_rounded, spike,
        float(np.mean(np.max(np.abs(res), axis=0) ** p)),
        float(np.mean(np.max(np.abs(dY - ybb.Y), axis=0) ** p)),
        float(np.mean(np.max(np.abs(ybb.Y), axis=0) ** 2)),
        r1, r2, asm.residual_rms,
        duality_check(opt, adj, spike, gamma, ybb, a1),
        float(sol_e.Y0 - opt.backward.Y0),
    )


def spike_sweep(opt: OptimalSolve, adj: AdjointBundle, u_alt, t0: float, epsilons: Sequence[float],
                M: float = np.inf, p: float = 1.5) -> SpikeSweep:
    gamma = solve_gamma(opt)
    u_star = opt.ensemble.u
    ua = np.broadcast_to(np.asarray(u_alt, dtype=float), u_star.shape) if not callable(u_alt) else u_alt(u_star)
    out = SpikeSweep()
    for eps in epsilons:
        sp = make_spike(u_star, ua, t0, eps, opt.backward.z_second_moments, M, opt.grid)
        if sp.is_trivial:
            continue
        out.results.append(spike_result(opt, adj, sp, gamma, p=p))
    return out


@dataclass
class ExpansionReport:
    epsilon: np.ndarray
    residual: np.ndarray  # E sup_t |Y^e - Y* - Y1 - Y2 - Ybb|^p
    p: float
    slope: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.slope > self.threshold)


def expansion_check(sweep: SpikeSweep, p: float = 1.5, margin: float = 0.05) -> ExpansionReport:
    """Rate of the value expansion residual over a spike sweep; it should beat eps^p."""
    e, r = sweep.epsilon, sweep.series("expansion_residual")
    return ExpansionReport(e, r, p, sweep.slope("expansion_residual"), p + margin)


# ------------------------------------------------------------ SMP experiment


@dataclass
class SmpCheck:
    reports: list
    persistent: list  # (node, candidate) violating in every seed

    @property
    def passed(self) -> bool:
        return not self.persistent

    def worst_t_stat(self) -> float:
        """Most negative t-statistic among persistent violations (0 when there are none)."""
        keys = set(self.persistent)
        vals = [r.t_stat for rep in self.reports for r in rep.rows if (r.node, r.candidate) in keys]
        return min(vals) if vals else 0.0


def smp_check(problem, control, grid: TimeGrid, n_pairs: int = 64, seeds: Sequence[int] = (0, 1),
              candidates: Sequence[Candidate] | None = None, M_values=(np.inf,), n_particles: int = 20_000,
              sigma: float = 3.0, basis: RegressionBasis | None = None) -> SmpCheck:
    """Solve the system and adjoints at ``control`` for each seed and test the SMP inequality.

    A (node, candidate) pair is a violation only if its gap is below
    ``-sigma`` standard errors in every seed.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    reports = []
    for s in seeds:
        opt = solve_optimal(problem, control, grid, n_particles, s, basis=basis)
        adj = solve_adjoints(opt, pair_size=n_pairs)
        reports.append(smp_gaps(opt, adj, candidates=candidates, M_values=M_values, sigma=sigma))
    return SmpCheck(reports, persistent_violations(reports))

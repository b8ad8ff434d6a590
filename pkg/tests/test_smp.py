import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsmp.adjoint import solve_adjoints, solve_optimal
from mfsmp.forward import TimeGrid, linearise_forward, make_spike, simulate_variational1, simulate_variational2
from mfsmp.measure import EmpiricalMeasure
from mfsmp.model import RiccatiOracle, make_problem
from mfsmp.smp import (Candidate, HamiltonianInputs, SmpReport, SmpRow, correctors, default_candidates, duality_check,
                       expansion_check, hamiltonian_full, hamiltonian_H1, persistent_violations,
                       reduced_hamiltonian, smp_gaps, solve_gamma, spike_sweep)

P3 = make_problem("spike-test")


def u_star(grid):
    return np.where(grid.nodes[:-1] < 0.5, 1.0, -1.0)


@pytest.fixture(scope="module")
def p3():
    g = TimeGrid(40)
    opt = solve_optimal(P3, u_star(g), g, 3000, 2)
    return opt, solve_adjoints(opt, pair_size=24)


@pytest.fixture(scope="module")
def p0():
    p = make_problem("lq-classical")
    g = TimeGrid(40)
    opt = solve_optimal(p, RiccatiOracle(p).feedback, g, 2000, 1)
    return opt, solve_adjoints(opt, pair_size=8)


# ------------------------------------------------------------------- Gamma


def test_gamma_is_deterministic_exponential_for_constant_f_y():
    p = make_problem("mf-lq", cy=0.7)
    g = TimeGrid(100)
    G = solve_gamma(solve_optimal(p, 0.0, g, 200, 0))
    np.testing.assert_allclose(G[-1], (1 + 0.7 * g.dt) ** g.steps, rtol=1e-12)
    assert G[-1, 0] == pytest.approx(math.exp(0.7), rel=0.01)


def test_gamma_is_a_martingale_for_constant_f_z():
    # pure quadratic with Phi = x: Z = 1 so f_z = gamma
    p = make_problem("pure-quadratic", gamma=0.8)
    opt = solve_optimal(p, 0.0, TimeGrid(50), 20_000, 3)
    np.testing.assert_allclose(opt.gen.f_z, 0.8, atol=1e-8)
    G = solve_gamma(opt)[-1]
    assert abs(G.mean() - 1.0) < 3 * G.std(ddof=1) / math.sqrt(G.size)


def test_gamma_is_one_without_generator_sensitivity():
    G = solve_gamma(solve_optimal(make_problem("mf-lq"), 0.0, TimeGrid(20), 100, 0))
    assert np.all(G == 1.0)


@given(st.floats(0.0, 2.0), st.floats(-1.0, 1.0), st.floats(0.0, 0.5))
@settings(max_examples=10, deadline=None)
def test_gamma_stays_positive_when_copy_sensitivity_is_nonnegative(ay, cy, gamma):
    p = make_problem("mf-lq", ay=ay, cy=cy, gamma=gamma, phi1=1.0, b2=0.5, s0=0.5)
    G = solve_gamma(solve_optimal(p, 0.0, TimeGrid(20), 200, 0))
    assert np.all(G > 0)


# ------------------------------------------------------------- Hamiltonian


def test_h1_direct_substitution():
    p = make_problem("mf-lq", bu=1.0, s0=0.0, s1=1.0)
    law = EmpiricalMeasure(np.zeros(1))
    val = hamiltonian_H1(p, 0.0, np.zeros(1), law, np.ones(1), np.zeros(1), 1.0, 2.0, 4.0)
    assert val[0] == 5.0


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
def test_h1_at_optimal_control_has_no_quadratic_term(p, q, P, u):
    prob = make_problem("spike-test")
    x = np.array([0.3])
    law = EmpiricalMeasure(np.array([0.3, -0.1]))
    val = hamiltonian_H1(prob, 0.1, x, law, np.array([u]), np.array([u]), p, q, P)
    expected = p * prob.drift(0.1, x, law, np.array([u])) + q * prob.diffusion(0.1, x, law, np.array([u]))
    np.testing.assert_allclose(val, expected, rtol=1e-14, atol=1e-14)
    assert hamiltonian_H1(prob, 0.1, x, law, np.array([u]), np.array([-u]), 0.0, 0.0, 0.0)[0] == 0.0


def test_reduced_hamiltonian_is_exact_without_law_dependence(p0):
    opt, adj = p0
    for k in (0, 17, 39):
        h = HamiltonianInputs.at(opt, adj, k)
        for u in (-1.0, 0.3, 2.0):
            np.testing.assert_array_equal(hamiltonian_full(opt.problem, h, u), reduced_hamiltonian(opt.problem, h, u))


def test_gap_is_zero_at_the_optimal_control(p3):
    opt, adj = p3
    same = Candidate("u*", lambda t, x, m: 1.0 if t < 0.5 else -1.0)
    rep = smp_gaps(opt, adj, candidates=[same])
    assert all(r.mean == 0.0 and r.se == 0.0 for r in rep.rows)


def test_control_free_problem_has_zero_gaps():
    p = make_problem("pure-quadratic", control_interval=(-1.0, 1.0))
    opt = solve_optimal(p, 0.0, TimeGrid(20), 500, 0)
    rep = smp_gaps(opt, solve_adjoints(opt, pair_size=8))
    assert all(r.mean == 0.0 and r.se == 0.0 for r in rep.rows)
    assert rep.passed


def test_default_candidates_cover_the_control_set():
    c = default_candidates(P3)
    assert len(c) >= 8
    vals = {float(v) for cand in c for t in (0.1, 0.6) for v in np.ravel(cand(t, np.array([-1.0, 1.0]), 0.0))}
    assert vals == {-1.0, 1.0}


def test_smp_gaps_at_optimum_have_no_violations(p3):
    opt, adj = p3
    rep = smp_gaps(opt, adj)
    assert len(rep.rows) == len(default_candidates(P3)) * opt.grid.steps
    assert rep.passed, rep.worst()


def test_persistence_needs_every_seed():
    row = lambda k, m: SmpRow(k, 0.0, "c", m, 1.0, {math.inf: True})  # noqa: E731
    a = SmpReport([row(1, -5.0), row(2, -5.0)], 3.0, (math.inf,), 0)
    b = SmpReport([row(1, -5.0), row(2, 0.0)], 3.0, (math.inf,), 1)
    assert persistent_violations([a, b]) == [(1, "c")]


# ----------------------------------------------------------------- duality


def test_duality_sides_vanish_without_source(p3):
    opt, adj = p3
    sp = make_spike(opt.ensemble.u, opt.ensemble.u, 0.3, 0.2, opt.backward.z_second_moments, np.inf, opt.grid)
    rep = duality_check(opt, adj, sp)
    assert rep.lhs == 0.0 and rep.rhs == 0.0


def test_duality_sides_vanish_for_empty_window(p3):
    opt, adj = p3
    sp = make_spike(opt.ensemble.u, -opt.ensemble.u, 0.3, 0.0, opt.backward.z_second_moments, np.inf, opt.grid)
    rep = duality_check(opt, adj, sp)
    assert rep.lhs == 0.0 and rep.rhs == 0.0


def test_duality_holds_on_small_ensemble(p3):
    opt, adj = p3
    sp = make_spike(opt.ensemble.u, -opt.ensemble.u, 0.3, 0.1, opt.backward.z_second_moments, np.inf, opt.grid)
    rep = duality_check(opt, adj, sp)
    assert abs(rep.discrepancy) / abs(rep.lhs) < 0.05


# ---------------------------------------------------------------- expansion


def test_correctors_collapse_without_law_dependence(p0):
    opt, adj = p0
    ens = opt.ensemble
    sp = make_spike(ens.u, ens.u + 1.0, 0.2, 0.2, opt.backward.z_second_moments, np.inf, ens.grid)
    lin = linearise_forward(opt.problem, ens, sp.u_alt)
    X1 = simulate_variational1(opt.problem, ens, sp, lin)
    X2 = simulate_variational2(opt.problem, ens, sp, X1, lin)
    Y1, Y2 = correctors(ens, adj, X1, X2)
    np.testing.assert_array_equal(Y1, adj.p1 * X1)
    np.testing.assert_array_equal(Y2, adj.p1 * X2 + 0.5 * adj.P1 * X1 ** 2)


def test_expansion_residual_vanishes_without_variation(p3):
    opt, adj = p3
    sw = spike_sweep(opt, adj, lambda u: u, 0.3, [0.2, 0.1])
    assert np.all(sw.series("expansion_residual") < 1e-20)


def test_expansion_check_report(p3):
    opt, adj = p3
    sw = spike_sweep(opt, adj, lambda u: -u, 0.3, [0.2, 0.1, 0.05, 0.025])
    rep = expansion_check(sw)
    assert rep.p == 1.5 and rep.threshold == pytest.approx(1.55)
    assert rep.epsilon.size == 4 and np.all(rep.residual > 0)
    assert np.all(sw.series("cost_gap") > 0)  # flipping the optimal control costs something

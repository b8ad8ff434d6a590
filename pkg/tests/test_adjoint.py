import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsmp.adjoint import (ZERO, CopyOperator, PairMemoryError, assemble_M, remainder_diagnostics,
                           remainder_statistics, solve_adjoints, solve_optimal, solve_p1, solve_p2)
from mfsmp.bsde import RegressionBasis
from mfsmp.forward import TimeGrid, linearise_forward, make_spike, simulate_variational1, simulate_variational2
from mfsmp.model import MFLinearOracle, RiccatiOracle, make_problem

P3 = make_problem("spike-test")


def u_star(grid):
    return np.where(grid.nodes[:-1] < 0.5, 1.0, -1.0)


@pytest.fixture(scope="module")
def p3():
    g = TimeGrid(50)
    opt = solve_optimal(P3, u_star(g), g, 2000, 4)
    return opt, solve_adjoints(opt, pair_size=24)


@pytest.fixture(scope="module")
def p0():
    p = make_problem("lq-classical")
    o = RiccatiOracle(p)
    g = TimeGrid(200)
    opt = solve_optimal(p, o.feedback, g, 20_000, 0)
    return p, o, opt, solve_adjoints(opt, pair_size=16)


# ---------------------------------------------------------------- operators


@given(st.integers(1, 7), st.integers(0, 2**31))
@settings(max_examples=30)
def test_copy_operator_algebra_matches_dense_matrices(n, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, n)), rng.normal(size=(n, n))
    l, r, v = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
    opA, opB = CopyOperator.kernel(A), CopyOperator.kernel(B)
    np.testing.assert_allclose(opA(v), A @ v / n, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose((opA @ opB)(v), A @ B @ v / n**2, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose((opA + opB)(v), (A + B) @ v / n, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose((opA - opB)(v), (A - B) @ v / n, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(opA.scale(left=l, right=r)(v), l * (A @ (r * v)) / n, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(CopyOperator.kernel_t(A)(v), A.T @ v / n, rtol=1e-12, atol=1e-12)


@given(st.integers(2, 9), st.integers(1, 3), st.integers(0, 2**31))
@settings(max_examples=30)
def test_tensor_operator_is_the_low_rank_kernel(n, degree, seed):
    rng = np.random.default_rng(seed)
    phi = RegressionBasis(degree=degree).features(rng.normal(size=n))
    C = rng.normal(size=(degree + 1, degree + 1))
    v = rng.normal(size=n)
    np.testing.assert_allclose(CopyOperator.tensor(phi, C)(v), phi @ C @ phi.T @ v / n, rtol=1e-10, atol=1e-10)


def test_zero_operator_absorbs():
    A = CopyOperator.kernel(np.ones((3, 3)))
    v = np.arange(3.0)
    assert CopyOperator.kernel(0.0) is ZERO
    assert (A @ ZERO) is ZERO and (ZERO + A) is A
    assert not ZERO(v).any()


# ---------------------------------------------------------------- oracles


def test_no_law_dependence_gives_exact_zero_pair_adjoints(p0):
    _, _, opt, adj = p0
    for pp in (adj.p2, adj.q21, adj.q22, adj.P2, adj.Q21, adj.Q22):
        assert pp.is_zero()
    assert not adj.q12.any() and not adj.Q12.any()


def test_pair_solver_itself_returns_zeros_without_law_dependence(p0):
    _, _, opt, adj = p0
    p2, q21, q22 = solve_p2(opt, adj.p1, adj.q11, pair_size=8)
    assert p2.is_zero() and q21.is_zero() and q22.is_zero()


def test_first_adjoint_matches_riccati(p0):
    _, o, opt, adj = p0
    g = opt.grid
    for k in range(0, g.steps, 20):
        ref = o.p1(g.nodes[k], opt.ensemble.X[k])
        err = np.sqrt(np.mean((adj.p1[k] - ref) ** 2) / np.mean(ref ** 2))
        assert err < 0.01


def test_second_adjoint_matches_linear_ode(p0):
    _, o, opt, adj = p0
    g = opt.grid
    for k in range(0, g.steps + 1, 20):
        assert np.mean(adj.P1[k]) == pytest.approx(o.P1(g.nodes[k]), rel=0.01)


def _mf_linear_adjoints(**params):
    p = make_problem("mf-linear", **params)
    g = TimeGrid(400)
    opt = solve_optimal(p, 0.0, g, 4000, 1)
    return p, MFLinearOracle(p), g, solve_adjoints(opt, pair_size=16)


def test_mean_field_first_adjoint_pair_is_deterministic_and_matches_ode():
    p, o, g, adj = _mf_linear_adjoints(phi1=0.4, phim=0.5, ax=0.3)
    for k in range(0, g.steps + 1, 40):
        v = adj.p2.values[k]
        assert np.ptp(v) < 1e-5 * max(1.0, abs(v.mean()))
        assert v.mean() == pytest.approx(o.p2(g.nodes[k]), rel=0.01)
        assert adj.p1[k].mean() == pytest.approx(o.p1(g.nodes[k]), rel=0.01)


def test_mean_field_second_adjoint_pair_matches_ode():
    p, o, g, adj = _mf_linear_adjoints(phiS=0.6)
    for k in range(0, g.steps + 1, 40):
        assert adj.P2.values[k].mean() == pytest.approx(o.P2(g.nodes[k]), rel=0.01)


def test_pair_memory_guard(p3):
    opt, adj = p3
    with pytest.raises(PairMemoryError):
        solve_adjoints(opt, pair_size=24, memory_budget=1024)


# ---------------------------------------------------------------- M process


def _variations(opt, u_alt, t0, eps):
    ens = opt.ensemble
    sp = make_spike(ens.u, u_alt, t0, eps, opt.backward.z_second_moments, np.inf, ens.grid)
    lin = linearise_forward(opt.problem, ens, sp.u_alt)
    X1 = simulate_variational1(opt.problem, ens, sp, lin)
    return sp, lin, X1, simulate_variational2(opt.problem, ens, sp, X1, lin)


def test_M_starts_at_zero_and_is_consistent(p3):
    opt, adj = p3
    sp, lin, X1, X2 = _variations(opt, -opt.ensemble.u, 0.3, 0.2)
    asm = assemble_M(opt, adj, X1, X2, sp, lin)
    assert not asm.M[0].any()
    assert asm.residual_rms < 5e-3


def test_M_vanishes_without_variation(p3):
    opt, adj = p3
    sp, lin, X1, X2 = _variations(opt, opt.ensemble.u, 0.3, 0.2)
    asm = assemble_M(opt, adj, X1, X2, sp, lin)
    assert not asm.M.any()
    assert remainder_statistics(asm) == (0.0, 0.0)


def test_assemble_M_rejects_bad_shapes(p3):
    opt, adj = p3
    sp, lin, X1, X2 = _variations(opt, -opt.ensemble.u, 0.3, 0.2)
    with pytest.raises(ValueError):
        assemble_M(opt, adj, X1[:-1], X2, sp, lin)


def test_remainder_diagnostics_slopes():
    rep = remainder_diagnostics({e: (e ** 3, 2 * e ** 4) for e in (0.2, 0.1, 0.05, 0.025)})
    assert rep.R1_slope == pytest.approx(3.0) and rep.R2_slope == pytest.approx(4.0)


@pytest.mark.slow
def test_M_consistency_residual_is_first_order_in_dt():
    rms = []
    for steps in (100, 200, 400):
        g = TimeGrid(steps)
        opt = solve_optimal(P3, u_star(g), g, 20_000, 5, base_steps=400)
        adj = solve_adjoints(opt, pair_size=16)
        sp, lin, X1, X2 = _variations(opt, -opt.ensemble.u, 0.3, 0.2)
        rms.append(assemble_M(opt, adj, X1, X2, sp, lin).residual_rms)
    slope = np.polyfit(np.log([1 / 100, 1 / 200, 1 / 400]), np.log(rms), 1)[0]
    assert slope >= 0.9, rms


def test_p1_equals_bundle_solution(p3):
    opt, adj = p3
    p1, q11 = solve_p1(opt)
    np.testing.assert_array_equal(p1, adj.p1)

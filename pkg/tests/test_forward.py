import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsmp.forward import (ForwardOverflowError, TimeGrid, brownian_increments, linearise_forward, make_spike,
                           prop42_check, simulate_forward, simulate_variational1, simulate_variational2,
                           squared_mean_unbiased, sup_moment, terminal_expansion_residual)
from mfsmp.model import MFLinearOracle, make_problem

P3 = make_problem("spike-test")


def u_star_levels(grid):
    return np.where(grid.nodes[:-1] < 0.5, 1.0, -1.0)


@pytest.fixture(scope="module")
def p3_small():
    g = TimeGrid(50)
    return simulate_forward(P3, u_star_levels(g), g, 400, 3)


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(0)
    with pytest.raises(ValueError):
        TimeGrid(10, 0.0)
    assert TimeGrid(4, 2.0).nodes.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]


def test_increments_are_per_particle_streams():
    g = TimeGrid(20)
    big, small = brownian_increments(7, 50, g), brownian_increments(7, 10, g)
    np.testing.assert_array_equal(big[:, :10], small)


def test_coarse_grid_sums_fine_increments():
    fine = brownian_increments(1, 30, TimeGrid(40), base_steps=40)
    coarse = brownian_increments(1, 30, TimeGrid(10), base_steps=40)
    np.testing.assert_allclose(coarse, fine.reshape(10, 4, 30).sum(axis=1), rtol=1e-13, atol=1e-15)
    with pytest.raises(ValueError):
        brownian_increments(1, 3, TimeGrid(3), base_steps=10)


def test_simulation_is_seed_deterministic(p3_small):
    again = simulate_forward(P3, p3_small.u, p3_small.grid, 400, 3)
    np.testing.assert_array_equal(again.X, p3_small.X)


def test_mean_field_linear_mean_matches_ode():
    p = make_problem("mf-linear")
    g = TimeGrid(200)
    ens = simulate_forward(p, 0.0, g, 20_000, 11)
    m, se = ens.X[-1].mean(), ens.X[-1].std(ddof=1) / np.sqrt(ens.n_particles)
    assert abs(m - MFLinearOracle(p).mean(1.0)) < 3 * se


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_is_reported():
    p = make_problem("mf-lq", b1=1e4)
    with pytest.raises(ForwardOverflowError):
        simulate_forward(p, 0.0, TimeGrid(400), 10, 0)


def test_spike_window_rounding():
    g = TimeGrid(100)
    u = np.ones((100, 3))
    sp = make_spike(u, -u, 0.3, 0.0549, np.zeros(100), np.inf, g)
    assert sp.epsilon_rounded == pytest.approx(0.05)
    assert sp.window.sum() == 5 and sp.window[30] and not sp.window[35]
    assert sp.measure == pytest.approx(0.05)
    assert make_spike(u, -u, 0.3, 0.0, np.zeros(100), np.inf, g).is_trivial
    with pytest.raises(ValueError):
        make_spike(u, -u, 1.0, 0.1, np.zeros(100), np.inf, g)


@given(st.lists(st.floats(0, 10), min_size=20, max_size=20), st.floats(0, 10), st.floats(0, 10))
def test_gamma_m_coverage_is_monotone(z2, M1, M2):
    g = TimeGrid(20)
    u = np.ones((20, 2))
    lo, hi = sorted((M1, M2))
    a = make_spike(u, -u, 0.0, 1.0, np.array(z2), lo, g).effective_set
    b = make_spike(u, -u, 0.0, 1.0, np.array(z2), hi, g).effective_set
    assert np.all(b[a])


def test_no_spike_means_no_variation(p3_small):
    ens = p3_small
    sp = make_spike(ens.u, ens.u, 0.2, 0.2, np.zeros(ens.grid.steps), np.inf, ens.grid)
    lin = linearise_forward(P3, ens, sp.u_alt)
    X1 = simulate_variational1(P3, ens, sp, lin)
    X2 = simulate_variational2(P3, ens, sp, X1, lin)
    assert not X1.any() and not X2.any()


def test_terminal_residual_vanishes_without_perturbation(p3_small):
    xT = p3_small.X[-1]
    zero = np.zeros_like(xT)
    assert not terminal_expansion_residual(P3, p3_small, xT, zero, zero).any()


@given(st.integers(2, 50), st.integers(0, 2**31))
@settings(max_examples=30)
def test_unbiased_square_of_mean(n, seed):
    w = np.random.default_rng(seed).normal(size=n)
    plain = w.mean() ** 2
    assert squared_mean_unbiased(w) == pytest.approx(plain - w.var(ddof=1) / n, rel=1e-9, abs=1e-12)


def test_theta_table_shapes(p3_small):
    X = p3_small.X
    table = prop42_check(X, {0.1: 0.1 * X, 0.2: 0.2 * X}, p3_small.grid.dt)
    assert table.epsilon.tolist() == [0.1, 0.2]
    assert table.slope == pytest.approx(2.0, abs=1e-9)  # scaling X1 by eps scales the integral by eps^2


def test_sup_moment():
    paths = np.array([[0.0, 0.0], [1.0, -2.0], [0.5, 1.0]])
    assert sup_moment(paths, 2) == pytest.approx((1 + 4) / 2)

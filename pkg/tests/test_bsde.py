import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsmp.bsde import (ClampError, PicardDivergence, RegressionBasis, bmo_diagnostics, p_of_bmo, psi,
                        regress_conditional, regress_pair, solve_linear_mf_bsde, solve_quadratic_mf_bsde)
from mfsmp.forward import TimeGrid, simulate_forward
from mfsmp.model import make_problem


@pytest.fixture(scope="module")
def brownian():
    return simulate_forward(make_problem("pure-quadratic"), 0.0, TimeGrid(50), 4000, 2)


@given(st.integers(1, 4), st.integers(0, 2**31))
@settings(max_examples=25)
def test_regression_reproduces_polynomials(degree, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=300)
    coef = rng.normal(size=degree + 1)
    y = np.polyval(coef, x)
    fit = regress_conditional(y, x, RegressionBasis(degree=degree))
    np.testing.assert_allclose(fit.fitted, y, rtol=1e-6, atol=1e-6)


def test_regression_z_estimate_recovers_volatility():
    rng = np.random.default_rng(0)
    n, dt = 200_000, 0.01
    x = rng.normal(size=n)
    dB = rng.normal(scale=math.sqrt(dt), size=n)
    fit = regress_conditional(x + 0.7 * dB, x, RegressionBasis(degree=2), increments=dB, dt=dt)
    assert np.mean(fit.z) == pytest.approx(0.7, abs=0.02)


def test_pair_regression_reproduces_separable_polynomials():
    rng = np.random.default_rng(1)
    x = rng.normal(size=30)
    values = 1.0 + x[:, None] * x[None, :] ** 2
    _, fitted, _, _ = regress_pair(values, x, RegressionBasis(degree=2))
    np.testing.assert_allclose(fitted, values, atol=1e-8)


def test_martingale_terminal_gives_conditional_expectation(brownian):
    # X is Brownian, so E[X_T | X_t] = X_t exactly in the linear span
    sol = solve_linear_mf_bsde(brownian, brownian.X[-1])
    np.testing.assert_allclose(sol.Y, brownian.X, atol=1e-9)
    np.testing.assert_allclose(sol.Z, 1.0, atol=1e-9)


def test_linear_mean_field_constant_coefficients():
    # -dY = (Y + E~[Y~]) dt with Y_T = 1 gives Y_0 = e^2; implicit Euler is O(dt) high, so N_t = 400
    ens = simulate_forward(make_problem("pure-quadratic"), 0.0, TimeGrid(400), 500, 2)
    sol = solve_linear_mf_bsde(ens, 1.0, rho=1.0, rho_pair=1.0)
    assert sol.Y0 == pytest.approx(math.e ** 2, rel=0.01)
    assert sol.Y0 == pytest.approx((1 - 2 / 400) ** -400, rel=1e-6)  # the discrete scheme, up to the ridge


def test_quadratic_bsde_cole_hopf(brownian):
    sol = solve_quadratic_mf_bsde(make_problem("pure-quadratic"), brownian)
    assert sol.Y0 == pytest.approx(0.5, rel=0.02)
    assert sol.sweeps >= 2 and sol.residual_log[-1] < 1e-10


def test_strict_mode_raises_on_active_clamp(brownian):
    with pytest.raises(ClampError):
        solve_quadratic_mf_bsde(make_problem("pure-quadratic"), brownian, z_cap=0.5, strict=True)


def test_clamp_warning_outside_strict_mode(brownian):
    with pytest.warns(RuntimeWarning, match="clamp"):
        solve_quadratic_mf_bsde(make_problem("pure-quadratic"), brownian, z_cap=0.5)


def test_picard_budget_exhaustion_is_reported(brownian):
    with pytest.raises(PicardDivergence):
        solve_quadratic_mf_bsde(make_problem("pure-quadratic"), brownian, picard_max=1)


def test_psi_values():
    grid = np.linspace(1.0, 50.0, 101)[1:]
    vals = psi(grid)
    assert np.all(np.diff(vals) < 0)
    assert float(psi(2.0)) == pytest.approx(0.09668, abs=1e-4)
    with pytest.raises(ValueError):
        psi(1.0)


@given(st.floats(1.01, 40.0))
def test_p_of_bmo_inverts_psi(p):
    assert p_of_bmo(float(psi(p))) == pytest.approx(p, rel=1e-6)


@given(st.floats(0.05, 2.0), st.floats(0.25, 2.0))
@settings(max_examples=25)
def test_constant_z_bmo_norm_and_energy(c, T):
    steps = 40
    Z = np.full((steps, 16), c)
    rep = bmo_diagnostics(Z, T / steps)
    assert rep.bmo2_estimate == pytest.approx(c * math.sqrt(T), rel=1e-12)
    assert abs(float(psi(rep.p_M)) - c * math.sqrt(T)) <= 1e-8
    assert rep.energy_ok


def test_basis_validation():
    with pytest.raises(ValueError):
        RegressionBasis(degree=-1)

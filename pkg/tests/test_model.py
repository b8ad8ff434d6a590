import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsmp.measure import EmpiricalMeasure
from mfsmp.model import (ColeHopfOracle, ControlSet, MFLinearOracle, MFLQOracle, RiccatiOracle, catalog,
                         check_derivatives, families, get_benchmark, make_problem, oracle_for)


def test_catalog_lists_the_benchmarks():
    names = {b.name for b in catalog()}
    assert {"lq-classical", "pure-quadratic", "mf-linear", "spike-test"} <= names
    assert isinstance(get_benchmark("pure-quadratic").oracle, ColeHopfOracle)


def test_unknown_family_is_rejected():
    with pytest.raises(KeyError):
        make_problem("no-such-problem")


@pytest.mark.parametrize("name", families())
def test_derivative_bundle_matches_finite_differences(name):
    err = check_derivatives(make_problem(name), probe_count=4, seed=0)
    assert max(err.values()) < 1e-6, err


def test_pure_quadratic_oracle_closed_form():
    # Y0 = log E exp(B_T) = T / 2
    assert ColeHopfOracle(make_problem("pure-quadratic")).value() == pytest.approx(0.5, abs=1e-12)


def test_mf_linear_oracle_constant_coefficients():
    # Y' = -2 Y backward from 1 on [0, 1]
    assert MFLinearOracle(make_problem("mf-linear")).value() == pytest.approx(math.e ** 2, rel=1e-9)


def test_lq_with_huge_control_penalty_picks_zero():
    o = RiccatiOracle(make_problem("lq-classical", qu=1e6))
    levels, _ = o.brute_force(levels=[-1.0, 0.0, 1.0])
    assert levels == (0.0, 0.0, 0.0, 0.0)


def test_riccati_feedback_beats_open_loop():
    o = RiccatiOracle(make_problem("lq-classical"))
    assert o.value() <= o.open_loop_value([0.0]) + 1e-12


def test_spike_test_brute_force_optimum():
    (levels, J), table = MFLQOracle(make_problem("spike-test")).brute_force()
    assert levels == (1.0, 1.0, -1.0, -1.0)
    assert len(table) == 16 and J == min(r[1] for r in table)


def test_oracle_dispatch():
    assert isinstance(oracle_for(make_problem("lq-classical")), RiccatiOracle)
    assert isinstance(oracle_for(make_problem("spike-test")), MFLQOracle)


def test_control_set_validation():
    with pytest.raises(ValueError):
        ControlSet()
    with pytest.raises(ValueError):
        ControlSet(values=(1.0,), interval=(0.0, 1.0))
    with pytest.raises(ValueError):
        ControlSet(interval=(1.0, 0.0))


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=5), st.integers(0, 1000))
def test_finite_control_set_samples_stay_inside(values, seed):
    cs = ControlSet(values=tuple(values))
    draws = cs.sample(np.random.default_rng(seed), size=20)
    assert cs.contains(draws)


@given(st.floats(-3, 3), st.floats(0, 3))
@settings(max_examples=30)
def test_spike_test_drift_is_law_equivariant_under_permutation(x0, shift):
    p = make_problem("spike-test")
    rng = np.random.default_rng(0)
    x = rng.normal(x0, 1.0 + shift, size=50)
    perm = rng.permutation(50)
    u = np.ones(50)
    a = p.drift(0.1, x, EmpiricalMeasure(x), u)[perm]
    b = p.drift(0.1, x[perm], EmpiricalMeasure(x[perm]), u)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)

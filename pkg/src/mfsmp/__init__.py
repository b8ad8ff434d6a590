"""Mean-field FBSDE control with quadratic generators: particle simulation,
regression BSDE solvers, adjoint equations and a numerical stochastic
maximum principle check."""

from ._kernels import backend
from .adjoint import AdjointBundle, OptimalSolve, PairProcess, assemble_M, solve_adjoints, solve_optimal
from .bsde import (BackwardSolution, RegressionBasis, bmo_diagnostics, psi, solve_expansion_bsde,
                   solve_linear_mf_bsde, solve_quadratic_mf_bsde)
from .forward import SpikePlan, TimeGrid, make_spike, simulate_forward, simulate_variational1, simulate_variational2
from .measure import EmpiricalMeasure, copy_mean, polynomial_battery, wasserstein2
from .model import ControlProblem, ControlSet, catalog, get_benchmark, make_problem
from .smp import duality_check, expansion_check, hamiltonian_full, smp_check, solve_gamma, spike_sweep

__version__ = "0.1.0"

__all__ = [
    "AdjointBundle", "BackwardSolution", "ControlProblem", "ControlSet", "EmpiricalMeasure", "OptimalSolve",
    "PairProcess", "RegressionBasis", "SpikePlan", "TimeGrid", "assemble_M", "backend", "bmo_diagnostics",
    "catalog", "copy_mean", "duality_check", "expansion_check", "get_benchmark", "hamiltonian_full", "make_problem", "make_spike", "polynomial_battery",
    "psi", "simulate_forward", "simulate_variational1", "simulate_variational2", "smp_check",
    "solve_adjoints", "solve_expansion_bsde", "solve_gamma", "solve_linear_mf_bsde", "solve_optimal",
    "solve_quadratic_mf_bsde", "spike_sweep", "wasserstein2",
]

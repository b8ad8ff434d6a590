"""Command line: configuration, experiment orchestration, rate fits and run persistence.

Every run writes ``manifest.json`` (config echo, versions, backend, timings)
next to its CSV/JSON artifacts; ``--config run/manifest.json`` re-executes it.
Exit codes: 0 all assertions pass, 1 an assertion failed, 2 execution error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from . import __version__, _kernels
from .adjoint import solve_adjoints, solve_optimal
from .bsde import RegressionBasis, bmo_diagnostics, solve_quadratic_mf_bsde
from .forward import TimeGrid, simulate_forward, variational_sweep
from .model import (ColeHopfOracle, MFLinearOracle, MFLQOracle, RiccatiOracle, families, make_problem,
                    oracle_for)
from .smp import default_candidates, smp_check, spike_sweep

COMMANDS = ("simulate", "solve", "adjoint", "smp-check", "rates", "bmo", "expansion")
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    problem: str = "spike-test"
    params: dict = field(default_factory=dict)
    control_values: list | None = None
    control_interval: list | None = None
    control: Any = "auto"  # "auto" | number | list of piecewise-constant levels
    n_particles: int = 20_000
    n_pairs: int = 64
    steps: int = 200
    seeds: list = field(default_factory=lambda: [0, 1])
    basis_degree: int = 3
    pair_degree: int = 2
    z_cap: Any = "auto"  # "auto" | None | positive number
    epsilons: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    t0: float = 0.3
    M_list: list = field(default_factory=lambda: [math.inf])
    candidates: str = "default"
    u_alt: Any = "flip"  # "flip" | number
    out: str = "runs"
    strict: bool = False
    dump_pairs: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: expected a mapping at the top level")
        d = dict(d.get("config", d))  # a manifest carries the config under "config"
        d.pop("version", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)

    def validate(self) -> None:
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(f"config.{path}: {msg}")

        need(self.problem in families(), "problem", f"unknown problem {self.problem!r}; known {families()}")
        need(isinstance(self.params, dict), "params", "must be a mapping")
        for k, v in self.params.items():
            need(isinstance(v, (int, float)) and not isinstance(v, bool), f"params.{k}", "must be numeric")
        for name in ("n_particles", "n_pairs", "steps", "basis_degree", "pair_degree"):
            v = getattr(self, name)
            need(isinstance(v, int) and v > 0, name, "must be a positive integer")
        need(self.n_pairs <= self.n_particles, "n_pairs", "cannot exceed n_particles")
        need(isinstance(self.seeds, list) and len(self.seeds) > 0, "seeds", "must be a nonempty list")
        for i, s in enumerate(self.seeds):
            need(isinstance(s, int) and s >= 0, f"seeds[{i}]", "must be a nonnegative integer")
        need(len(self.epsilons) >= 1, "epsilons", "must be nonempty")
        for i, e in enumerate(self.epsilons):
            need(isinstance(e, (int, float)) and e > 0, f"epsilons[{i}]", "must be positive")
        self.M_list = [float(_yaml_float(m)) for m in self.M_list]
        for i, m in enumerate(self.M_list):
            need(m > 0, f"M_list[{i}]", "must be positive")
        need(self.z_cap in ("auto", None) or (isinstance(self.z_cap, (int, float)) and self.z_cap > 0),
             "z_cap", "must be 'auto', null or a positive number")
        need(self.candidates == "default", "candidates", "only 'default' is supported")
        need(self.u_alt == "flip" or isinstance(self.u_alt, (int, float)), "u_alt", "'flip' or a number")
        ok_control = (self.control == "auto" or isinstance(self.control, (int, float))
                      or (isinstance(self.control, list) and all(isinstance(c, (int, float)) for c in self.control)))
        need(ok_control, "control", "'auto', a number or a list of levels")

    def grid(self) -> TimeGrid:
        return TimeGrid(self.steps, float(make_problem_from(self).horizon))

    def rounded_epsilons(self) -> list[float]:
        dt = self.grid().dt
        return [math.floor(e / dt + 1e-9) * dt for e in self.epsilons]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["M_list"] = [m if math.isfinite(m) else ".inf" for m in self.M_list]
        d["version"] = CONFIG_VERSION
        return d


def _yaml_float(v):
    return float("inf") if isinstance(v, str) and v.lower() in (".inf", "inf") else v


def make_problem_from(cfg: RunConfig):
    return make_problem(cfg.problem, control_values=cfg.control_values, control_interval=cfg.control_interval,
                        **cfg.params)


def reference_control(problem, cfg: RunConfig, grid: TimeGrid):
    """The control the run treats as optimal: an oracle feedback, a brute-force open loop or a given one."""
    T = problem.horizon

    def levels_path(levels):
        levels = np.asarray(levels, dtype=float)
        idx = np.minimum((grid.nodes[:-1] / T * levels.size + 1e-12).astype(int), levels.size - 1)
        return levels[idx]

    c = cfg.control
    if isinstance(c, (int, float)):
        return float(c), {"kind": "constant", "value": float(c)}
    if isinstance(c, list):
        return levels_path(c), {"kind": "levels", "levels": c}
    oracle = oracle_for(problem)
    cs = problem.control_set
    if cs.is_finite and len(cs.values) == 1:
        return float(cs.values[0]), {"kind": "singleton", "value": float(cs.values[0])}
    if isinstance(oracle, RiccatiOracle):
        return oracle.feedback, {"kind": "riccati-feedback"}
    if isinstance(oracle, MFLQOracle):
        (levels, J), _ = oracle.brute_force()
        return levels_path(levels), {"kind": "brute-force", "levels": list(levels), "J": J}
    if isinstance(oracle, (ColeHopfOracle, MFLinearOracle)):
        # the control does not enter these problems; any admissible level is optimal
        lv = cs.levels()
        v = float(lv[np.argmin(np.abs(lv))])
        return v, {"kind": "control-free", "value": v}
    raise ConfigError(f"config.control: no automatic optimal control for {problem.name}")


def worst_constant(problem) -> float:
    """Constant control level with the largest oracle cost (the power-check control)."""
    oracle = oracle_for(problem)
    levels = problem.control_set.levels()
    if isinstance(oracle, MFLQOracle):
        costs = [oracle.value([v]) for v in levels]
    elif isinstance(oracle, RiccatiOracle):
        costs = [oracle.open_loop_value([v]) for v in levels]
    else:
        return float(levels[0])
    return float(levels[int(np.argmax(costs))])


def oracle_value(problem, control_info) -> float | None:
    oracle = oracle_for(problem)
    if isinstance(oracle, (ColeHopfOracle, MFLinearOracle)):
        return oracle.value()
    if isinstance(oracle, RiccatiOracle):
        return oracle.value() if control_info["kind"] == "riccati-feedback" else None
    if isinstance(oracle, MFLQOracle):
        if control_info["kind"] == "brute-force":
            return control_info["J"]
        if control_info["kind"] == "levels":
            return oracle.value(control_info["levels"])
        if control_info["kind"] in ("constant", "singleton"):
            return oracle.value([control_info["value"]])
    return None


# ------------------------------------------------------------------ rates


@dataclass
class RateFit:
    epsilon: np.ndarray
    statistic: np.ndarray
    slope: float
    slope_se: float
    intercept: float
    r2: float

    def as_dict(self) -> dict:
        return {"epsilon": self.epsilon.tolist(), "statistic": self.statistic.tolist(), "slope": self.slope,
                "slope_se": self.slope_se, "intercept": self.intercept, "r2": self.r2}


def fit_rate(points: Sequence[tuple[float, float]]) -> RateFit:
    """OLS of log(statistic) on log(epsilon) with the slope standard error and R^2."""
    pts = [(float(e), float(s)) for e, s in points]
    if len(pts) < 4:
        raise ValueError(f"rate fit needs at least 4 points, got {len(pts)}")
    e = np.array([p[0] for p in pts])
    s = np.array([p[1] for p in pts])
    if np.any(e <= 0) or np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ValueError("rate fit needs positive epsilons and positive finite statistics")
    x, y = np.log(e), np.log(s)
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    n = len(x)
    sxx = float(np.sum((x - x.mean()) ** 2))
    sigma2 = float(resid @ resid) / (n - 2)
    syy = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / syy if syy > 0 else 1.0
    return RateFit(e, s, float(coef[1]), math.sqrt(sigma2 / sxx), float(coef[0]), r2)


# ---------------------------------------------------------------- plumbing


def workers() -> int:
    """Worker count from MFSMP_WORKERS; it changes scheduling only, never numerics."""
    try:
        return max(1, int(os.environ.get("MFSMP_WORKERS", "1")))
    except ValueError:
        return 1


def _map(fn: Callable, items: Sequence) -> list:
    n = workers()
    if n == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))  # results in input order


def _versions() -> dict:
    import numba
    import scipy
    return {"mfsmp": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "backend": _kernels.backend()}


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return o


def _dump(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)


class Assertions:
    def __init__(self):
        self.items: list[dict] = []

    def check(self, name: str, value, passed: bool, criterion: str) -> None:
        self.items.append({"name": name, "value": value, "criterion": criterion, "passed": bool(passed)})

    @property
    def passed(self) -> bool:
        return all(i["passed"] for i in self.items)


def _basis(cfg):
    return RegressionBasis(degree=cfg.basis_degree)


def _zcap(cfg):
    return None if cfg.z_cap in ("auto", None) else float(cfg.z_cap)


def _u_alt(cfg, problem):
    if cfg.u_alt == "flip":
        cs = problem.control_set
        lv = np.asarray(cs.levels(), dtype=float)
        lo, hi = float(lv.min()), float(lv.max())
        return lambda u: lo + hi - u
    v = float(cfg.u_alt)
    return lambda u: np.full_like(u, v)


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig, out: Path, A: Assertions) -> dict:
    problem = make_problem_from(cfg)
    grid = cfg.grid()
    control, info = reference_control(problem, cfg, grid)
    rows = []
    summary = {"control": info}
    for seed in cfg.seeds:
        ens = simulate_forward(problem, control, grid, cfg.n_particles, seed)
        m = ens.X.mean(axis=1)
        v = ens.X.var(axis=1, ddof=1)
        rows += [(seed, k, grid.nodes[k], m[k], v[k]) for k in range(grid.steps + 1)]
        summary[f"seed{seed}"] = {"mean_T": m[-1], "var_T": v[-1]}
        A.check(f"finite_states_seed{seed}", True, bool(np.all(np.isfinite(ens.X))), "all states finite")
    _write_csv(out / "state_moments.csv", ["seed", "node", "t", "mean_X", "var_X"], rows)
    return summary


def _oracle_tolerance(problem) -> float:
    return {"pure-quadratic": 0.02, "mf-linear": 0.01}.get(problem.name, 0.01)


def cmd_solve(cfg: RunConfig, out: Path, A: Assertions) -> dict:
    problem = make_problem_from(cfg)
    grid = cfg.grid()
    control, info = reference_control(problem, cfg, grid)
    ref = oracle_value(problem, info)
    rows = []
    summary = {"control": info, "oracle_Y0": ref}

    def one(seed):
        ens = simulate_forward(problem, control, grid, cfg.n_particles, seed)
        return seed, solve_quadratic_mf_bsde(problem, ens, _basis(cfg), z_cap=_zcap(cfg), strict=cfg.strict)

    for seed, sol in _map(one, cfg.seeds):
        z2 = np.append(sol.z_second_moments, np.nan)
        ym = sol.Y.mean(axis=1)
        rows += [(seed, k, grid.nodes[k], ym[k], z2[k]) for k in range(grid.steps + 1)]
        entry = {"Y0": sol.Y0, "sweeps": sol.sweeps, "residual_log": sol.residual_log,
                 "clamp_fraction": sol.clamp_fraction}
        if ref is not None:
            gap = abs(sol.Y0 - ref) / max(abs(ref), 1e-12)
            entry["oracle_gap"] = gap
            tol = _oracle_tolerance(problem)
            A.check(f"oracle_Y0_seed{seed}", gap, gap <= tol, f"relative gap <= {tol}")
        summary[f"seed{seed}"] = entry
    _write_csv(out / "backward.csv", ["seed", "node", "t", "mean_Y", "second_moment_Z"], rows)
    return summary


def _pair_summary(pp, k):
    v = pp.values[k]
    return float(v.mean()), float(np.mean(v * v))


def cmd_adjoint(cfg: RunConfig, out: Path, A: Assertions) -> dict:
    problem = make_problem_from(cfg)
    grid = cfg.grid()
    control, info = reference_control(problem, cfg, grid)
    oracle = oracle_for(problem)
    summary = {"control": info}
    names = ["p1", "q11", "P1", "Q11", "p2", "q21", "q22", "P2", "Q21", "Q22"]
    header = ["seed", "node", "t"] + [f"{n}_{s}" for n in names for s in ("mean", "second_moment")]
    rows = []
    for seed in cfg.seeds:
        opt = solve_optimal(problem, control, grid, cfg.n_particles, seed, basis=_basis(cfg), z_cap=_zcap(cfg),
                            strict=cfg.strict)
        adj = solve_adjoints(opt, pair_size=cfg.n_pairs, pair_basis=RegressionBasis(degree=cfg.pair_degree))
        for k in range(grid.steps + 1):
            r = [seed, k, grid.nodes[k]]
            for n in names:
                obj = getattr(adj, n)
                if hasattr(obj, "values"):
                    r += list(_pair_summary(obj, k)) if k < obj.values.shape[0] else [np.nan, np.nan]
                else:
                    r += [float(obj[k].mean()), float(np.mean(obj[k] ** 2))] if k < obj.shape[0] else [np.nan, np.nan]
            rows.append(r)
        entry = {"Y0": opt.backward.Y0, "p2_is_zero": adj.p2.is_zero(), "P2_is_zero": adj.P2.is_zero()}
        if not problem.mean_field:
            A.check(f"pair_adjoints_vanish_seed{seed}", entry["p2_is_zero"] and entry["P2_is_zero"],
                    entry["p2_is_zero"] and entry["P2_is_zero"], "p2 == P2 == 0 exactly")
        if isinstance(oracle, RiccatiOracle) and info["kind"] == "riccati-feedback":
            err = max(float(np.sqrt(np.mean((adj.p1[k] - oracle.p1(grid.nodes[k], opt.ensemble.X[k])) ** 2))
                            / np.sqrt(np.mean(oracle.p1(grid.nodes[k], opt.ensemble.X[k]) ** 2)))
                      for k in range(0, grid.steps, max(1, grid.steps // 10)))
            entry["p1_rel_error"] = err
            A.check(f"p1_oracle_seed{seed}", err, err <= 0.01, "relative RMS error <= 1%")
        if isinstance(oracle, MFLinearOracle):
            sample = range(0, grid.steps + 1, max(1, grid.steps // 10))
            checks = [("p1", lambda k: adj.p1[k].mean(), oracle.p1)]
            if oracle.P["phiS"] == 0.0:
                checks.append(("p2", lambda k: adj.p2.values[k].mean(), oracle.p2))
            checks.append(("P2", lambda k: adj.P2.values[k].mean(), oracle.P2))
            for name, est, ref in checks:
                refs = [ref(grid.nodes[k]) for k in sample]
                scale = max(max(abs(r) for r in refs), 1e-12)
                err = float(max(abs(est(k) - r) for k, r in zip(sample, refs)) / scale)
                entry[f"{name}_rel_error"] = err
                if scale > 1e-12:
                    A.check(f"{name}_oracle_seed{seed}", err, err <= 0.01, "relative error <= 1%")
        if cfg.dump_pairs:
            np.savez_compressed(out / f"pairs_seed{seed}.npz",
                                **{n: getattr(adj, n).values for n in ("p2", "q21", "q22", "P2", "Q21", "Q22")})
        summary[f"seed{seed}"] = entry
    _write_csv(out / "adjoint_summary.csv", header, rows)
    return summary


def cmd_smp(cfg: RunConfig, out: Path, A: Assertions, power: bool = False) -> dict:
    problem = make_problem_from(cfg)
    grid = cfg.grid()
    control, info = reference_control(problem, cfg, grid)
    cands = default_candidates(problem)
    res = smp_check(problem, control, grid, n_pairs=cfg.n_pairs, seeds=cfg.seeds, candidates=cands,
                    M_values=tuple(cfg.M_list), n_particles=cfg.n_particles, basis=_basis(cfg))
    rows = [(rep.seed, r.node, r.t, r.candidate, r.mean, r.se, r.t_stat) for rep in res.reports for r in rep.rows]
    _write_csv(out / "smp_gaps.csv", ["seed", "node", "t", "candidate", "gap_mean", "gap_se", "t_stat"], rows)
    summary = {"control": info, "candidates": [c.name for c in cands], "persistent_violations": res.persistent,
               "reports": [r.as_dict() for r in res.reports],
               "copy_control": "candidate applied to the copies as well (population-level spike)"}
    A.check("smp_no_persistent_violation", len(res.persistent), res.passed, "0 violations at 3 SE in all seeds")
    if power:
        bad = worst_constant(problem)
        pres = smp_check(problem, bad, grid, n_pairs=cfg.n_pairs, seeds=cfg.seeds, candidates=cands,
                         M_values=tuple(cfg.M_list), n_particles=cfg.n_particles, basis=_basis(cfg))
        t = pres.worst_t_stat()
        summary["power_check"] = {"control": bad, "persistent_violations": len(pres.persistent), "worst_t": t}
        A.check("smp_power", t, t < -10.0, "a persistent violation beyond 10 SE")
    return summary


RATE_CRITERIA = {
    "state_gap": ("band", 1.0, 0.3),
    "X1": ("band", 1.0, 0.3),
    "X2": ("band", 2.0, 0.3),
    "first_order_gap": ("band", 2.0, 0.3),
    "second_order_gap": ("above", 2.05, None),
    "terminal": ("above", 2.05, None),
}


def _judge(A, name, fit: RateFit, rule):
    kind, target, width = rule
    if kind == "band":
        A.check(name, fit.slope, abs(fit.slope - target) <= width, f"slope {target} +/- {width}")
    elif kind == "atleast":
        A.check(name, fit.slope, fit.slope >= target, f"slope >= {target}")
    else:
        A.check(name, fit.slope, fit.slope > target, f"slope > {target}")


def cmd_rates(cfg: RunConfig, out: Path, A: Assertions) -> dict:
    problem = make_problem_from(cfg)
    grid = cfg.grid()
    control, info = reference_control(problem, cfg, grid)
    ua = _u_alt(cfg, problem)
    summary = {"control": info, "epsilons_rounded": cfg.rounded_epsilons()}
    rows = []
    for seed in cfg.seeds:
        ens = simulate_forward(problem, control, grid, cfg.n_particles, seed)
        sw = variational_sweep(problem, ens, ua(ens.u), cfg.t0, cfg.epsilons, M=max(cfg.M_list))
        fits = {}
        for name in RATE_CRITERIA:
            fits[name] = fit_rate(zip(sw.epsilon, sw.table[name]))
            _judge(A, f"{name}_seed{seed}", fits[name], RATE_CRITERIA[name])
        fits["theta_integral"] = fit_rate(zip(sw.theta.epsilon, sw.theta.integral))
        A.check(f"theta_integral_seed{seed}", fits["theta_integral"].slope, fits["theta_integral"].slope > 1.05,
                "slope > 1.05")
        for n, e in enumerate(sw.epsilon):
            rows.append([seed, e] + [sw.table[k][n] for k in RATE_CRITERIA] + [sw.theta.integral[n]])
        summary[f"seed{seed}"] = {k: f.as_dict() for k, f in fits.items()}
    _write_csv(out / "variational_rates.csv",
               ["seed", "epsilon"] + [f"E_sup_{k}_sq" if k != "terminal" else "terminal_cost_remainder_sq"
                                      for k in RATE_CRITERIA] + ["theta_X1_integral"], rows)
    return summary


def cmd_bmo(cfg: RunConfig, out: Path, A: Assertions) -> dict:
    problem = make_problem_from(cfg)
    grid = cfg.grid()
    control, info = reference_control(problem, cfg, grid)
    summary = {"control": info}
    for seed in cfg.seeds:
        ens = simulate_forward(problem, control, grid, cfg.n_particles, seed)
        sol = solve_quadratic_mf_bsde(problem, ens, _basis(cfg), z_cap=_zcap(cfg), strict=cfg.strict)
        rep = bmo_diagnostics(sol.Z, grid.dt, ens.X[:-1], _basis(cfg))
        summary[f"seed{seed}"] = rep.as_dict()
        A.check(f"energy_inequality_seed{seed}", rep.energy_check, rep.energy_ok, "energy inequality n=1,2,3")
    return summary


def cmd_expansion(cfg: RunConfig, out: Path, A: Assertions) -> dict:
    problem = make_problem_from(cfg)
    grid = cfg.grid()
    control, info = reference_control(problem, cfg, grid)
    ua = _u_alt(cfg, problem)
    summary = {"control": info, "epsilons_rounded": cfg.rounded_epsilons()}
    rows = []
    cols = ["expansion_residual", "first_order_residual", "ybb_sup2", "R1", "R2", "consistency_rms", "cost_gap"]
    for seed in cfg.seeds:
        opt = solve_optimal(problem, control, grid, cfg.n_particles, seed, basis=_basis(cfg), z_cap=_zcap(cfg),
                            strict=cfg.strict)
        adj = solve_adjoints(opt, pair_size=cfg.n_pairs, pair_basis=RegressionBasis(degree=cfg.pair_degree))
        sw = spike_sweep(opt, adj, ua, cfg.t0, cfg.epsilons, M=max(cfg.M_list))
        for r in sw.results:
            d = r.duality
            rows.append([seed, r.epsilon] + [getattr(r, c) for c in cols]
                        + [d.lhs, d.rhs, d.rhs_se, d.rhs_cv, d.rhs_cv_se])
        entry = {}
        for name, rule in [("expansion_residual", ("above", 1.55, None)), ("R1", ("above", 2.05, None)),
                           ("R2", ("above", 2.05, None)), ("ybb_sup2", ("atleast", 1.0, None))]:
            fit = fit_rate(zip(sw.epsilon, sw.series(name)))
            entry[name] = fit.as_dict()
            _judge(A, f"{name}_seed{seed}", fit, rule)
        rel = [abs(r.duality.discrepancy) / abs(r.duality.lhs) for r in sw.results if r.duality.lhs != 0]
        entry["duality_relative_discrepancy"] = rel
        A.check(f"duality_seed{seed}", max(rel), max(rel) < 0.05, "relative discrepancy < 5%")
        summary[f"seed{seed}"] = entry
    _write_csv(out / "expansion.csv", ["seed", "epsilon"] + cols
               + ["Ybb0", "duality_integral", "duality_integral_se", "duality_integral_cv", "duality_integral_cv_se"],
               rows)
    return summary


HANDLERS = {
    "simulate": cmd_simulate, "solve": cmd_solve, "adjoint": cmd_adjoint, "smp-check": cmd_smp,
    "rates": cmd_rates, "bmo": cmd_bmo, "expansion": cmd_expansion,
}


# --------------------------------------------------------------------- run


def run(cfg: RunConfig, command: str, out: str | os.PathLike | None = None, **kw) -> tuple[int, Path, dict]:
    """Execute one command; returns (exit code, run directory, summary)."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}")
    base = Path(out or cfg.out)
    run_dir = base / f"{command}-{cfg.problem}-s{'_'.join(map(str, cfg.seeds))}"
    run_dir.mkdir(parents=True, exist_ok=True)
    A = Assertions()
    t0 = time.perf_counter()
    summary = HANDLERS[command](cfg, run_dir, A, **kw)
    elapsed = time.perf_counter() - t0
    summary["assertions"] = A.items
    summary["passed"] = A.passed
    _dump(run_dir / "summary.json", summary)
    _dump(run_dir / "manifest.json", {"command": command, "config": cfg.to_dict(), "versions": _versions(),
                                       "workers": workers(), "elapsed_seconds": elapsed, "options": kw})
    return (0 if A.passed else 1), run_dir, summary


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfsmp", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML config or a previous run's manifest.json")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides config seeds")
    p.add_argument("--out", help="output directory (default: config 'out')")
    p.add_argument("--problem", help="catalog problem name; overrides the config")
    p.add_argument("--steps", type=int, help="time steps N_t")
    p.add_argument("--particles", type=int, help="particle count N_p")
    p.add_argument("--power", action="store_true", help="smp-check: also run the bad-control power check")
    p.add_argument("--dump-pairs", action="store_true", help="adjoint: write dense pair processes (npz)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        data: dict = {}
        if args.config:
            with open(args.config) as fh:
                data = yaml.safe_load(fh) or {}
            data = dict(data.get("config", data))
        if args.problem:
            data["problem"] = args.problem
        if args.steps:
            data["steps"] = args.steps
        if args.particles:
            data["n_particles"] = args.particles
            data["n_pairs"] = min(data.get("n_pairs", 64), args.particles)
        if args.seed:
            data["seeds"] = list(args.seed)
        if args.dump_pairs:
            data["dump_pairs"] = True
        cfg = RunConfig.from_dict(data)
        kw = {"power": True} if (args.command == "smp-check" and args.power) else {}
        code, run_dir, summary = run(cfg, args.command, args.out, **kw)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # solver failures surface with context
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for a in summary["assertions"]:
        print(f"{'PASS' if a['passed'] else 'FAIL'}  {a['name']}: {_jsonable(a['value'])!r} ({a['criterion']})")
    print(f"run directory: {run_dir}")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

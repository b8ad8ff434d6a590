"""Control problems, their derivative bundles, and the benchmark catalog.

Coefficient conventions (scalar state, control and noise):

* ``drift(t, x, law, u)`` and ``diffusion(t, x, law, u)`` with ``law`` an
  :class:`~mfsmp.measure.EmpiricalMeasure` over R.
* ``generator(t, x, y, z, law2, u)`` with ``law2`` an empirical measure over R^2
  (the joint law of (X, Y)).
* ``terminal(x, law)``.

All functions are vectorised over particles. Pair derivatives take the pairing
variable last (``xt`` or ``(xt, yt)``) and are called with ``x[:, None]`` and
``xt[None, :]``; they may return any shape that broadcasts to ``(n, m)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.integrate import solve_ivp

from .measure import EmpiricalMeasure


# ------------------------------------------------------------------- types


@dataclass(frozen=True)
class ControlSet:
    """Finite list of reals, or a closed interval ``[lo, hi]``."""

    values: tuple[float, ...] | None = None
    interval: tuple[float, float] | None = None

    def __post_init__(self):
        if (self.values is None) == (self.interval is None):
            raise ValueError("give exactly one of values / interval")
        if self.interval is not None and self.interval[0] > self.interval[1]:
            raise ValueError("empty interval")

    @property
    def is_finite(self) -> bool:
        return self.values is not None

    def contains(self, u) -> bool:
        u = np.asarray(u, dtype=float)
        if self.is_finite:
            return bool(np.all(np.isin(u, np.asarray(self.values))))
        lo, hi = self.interval
        return bool(np.all((u >= lo) & (u <= hi)))

    def levels(self, n: int = 9) -> np.ndarray:
        if self.is_finite:
            return np.asarray(self.values, dtype=float)
        return np.linspace(self.interval[0], self.interval[1], n)

    def sample(self, rng: np.random.Generator, size=None):
        if self.is_finite:
            return rng.choice(np.asarray(self.values, dtype=float), size=size)
        return rng.uniform(*self.interval, size=size)


@dataclass
class DerivativeBundle:
    b_x: Callable
    b_xx: Callable
    b_mu: Callable
    b_xmu: Callable
    sigma_x: Callable
    sigma_xx: Callable
    sigma_mu: Callable
    sigma_xmu: Callable
    f_x: Callable
    f_y: Callable
    f_z: Callable
    f_hess: Callable  # -> (xx, xy, xz, yy, yz, zz)
    f_mu: Callable  # -> (f_mu_x, f_mu_y)
    f_mu_jac: Callable  # -> (d_xt f_mu_x, d_yt f_mu_x, d_xt f_mu_y, d_yt f_mu_y)
    phi_x: Callable
    phi_xx: Callable
    phi_mu: Callable
    phi_xmu: Callable


@dataclass
class ControlProblem:
    name: str
    horizon: float
    initial_state: float
    control_set: ControlSet
    drift: Callable
    diffusion: Callable
    generator: Callable
    terminal: Callable
    derivatives: DerivativeBundle
    quadratic_growth_gamma: float = 0.0
    bounds: dict[str, float] = field(default_factory=dict)
    params: dict[str, Any] = field(default_factory=dict)
    mean_field: bool = True

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.quadratic_growth_gamma < 0:
            raise ValueError("gamma must be nonnegative")


# ------------------------------------------- the mean-field LQ coefficient family

_MFLQ_DEFAULTS = dict(
    T=1.0, x0=0.0,
    # b = b0 + b1 x + b2 E[X] + b3 E[X^2] + bu u + rho u x
    b0=0.0, b1=0.0, b2=0.0, b3=0.0, bu=0.0, rho=0.0,
    # sigma = s0 + s1 u + s3 E[X]
    s0=1.0, s1=0.0, s3=0.0,
    # f = gamma/2 z^2 + qx x^2 + qu u^2 + cy y + ax E[X] + ay E[Y] + c(t) u,
    # c(t) = c_pre on [0, t_switch), c_post on [t_switch, T]
    gamma=0.0, qx=0.0, qu=0.0, cy=0.0, ax=0.0, ay=0.0,
    c_pre=0.0, c_post=0.0, t_switch=0.5,
    # Phi = phi0 + phi1 x + phi2/2 x^2 + phim E[X] + phiS/2 E[X^2]
    phi0=0.0, phi1=0.0, phi2=0.0, phim=0.0, phiS=0.0,
)


def _const_like(a, c: float):
    """Constant derivative as a 0-d value; consumers broadcast it against ``a``."""
    return np.float64(c)


def mflq_problem(name: str = "mf-lq", control_set: ControlSet | None = None, **params) -> ControlProblem:
    """Affine-in-state dynamics, quadratic costs, law dependence through means.

    Every catalog problem is an instance of this family, which keeps the value
    function quadratic in x (so polynomial regression bases are exact up to
    sampling noise) while exercising all measure-derivative slots.
    """
    unknown = set(params) - set(_MFLQ_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown mf-lq parameters: {sorted(unknown)}")
    p = {**_MFLQ_DEFAULTS, **params}
    P = {k: float(v) for k, v in p.items()}
    cs = control_set or ControlSet(interval=(-2.0, 2.0))

    def mean1(law):
        return float(law.mean())

    def moments(law):
        return float(law.mean()), float(law.second_moment())

    def c_of_t(t):
        return np.where(np.asarray(t) < P["t_switch"], P["c_pre"], P["c_post"])

    def drift(t, x, law, u):
        m, S = moments(law)
        return P["b0"] + P["b1"] * x + P["b2"] * m + P["b3"] * S + P["bu"] * u + P["rho"] * u * x

    def diffusion(t, x, law, u):
        return P["s0"] + P["s1"] * u + P["s3"] * mean1(law) + 0.0 * x

    def generator(t, x, y, z, law2, u):
        mx, my = law2.mean()
        return (0.5 * P["gamma"] * z * z + P["qx"] * x * x + P["qu"] * u * u + P["cy"] * y
                + P["ax"] * mx + P["ay"] * my + c_of_t(t) * u)

    def terminal(x, law):
        m, S = moments(law)
        return P["phi0"] + P["phi1"] * x + 0.5 * P["phi2"] * x * x + P["phim"] * m + 0.5 * P["phiS"] * S

    def f_hess(t, x, y, z, law2, u):
        zero = np.float64(0.0)
        return (np.float64(2 * P["qx"]), zero, zero, zero, zero, np.float64(P["gamma"]))

    d = DerivativeBundle(
        b_x=lambda t, x, law, u: P["b1"] + P["rho"] * u + 0.0 * x,
        b_xx=lambda t, x, law, u: _const_like(x, 0.0),
        b_mu=lambda t, x, law, u, xt: P["b2"] + 2 * P["b3"] * np.asarray(xt, dtype=float),
        b_xmu=lambda t, x, law, u, xt: _const_like(xt, 2 * P["b3"]),
        sigma_x=lambda t, x, law, u: _const_like(x, 0.0),
        sigma_xx=lambda t, x, law, u: _const_like(x, 0.0),
        sigma_mu=lambda t, x, law, u, xt: _const_like(xt, P["s3"]),
        sigma_xmu=lambda t, x, law, u, xt: _const_like(xt, 0.0),
        f_x=lambda t, x, y, z, law2, u: 2 * P["qx"] * x,
        f_y=lambda t, x, y, z, law2, u: P["cy"] + 0.0 * x,
        f_z=lambda t, x, y, z, law2, u: P["gamma"] * z,
        f_hess=f_hess,
        f_mu=lambda t, x, y, z, law2, u, xt, yt: (_const_like(xt, P["ax"]), _const_like(yt, P["ay"])),
        f_mu_jac=lambda t, x, y, z, law2, u, xt, yt: (_const_like(xt, 0.0),) * 4,
        phi_x=lambda x, law: P["phi1"] + P["phi2"] * x,
        phi_xx=lambda x, law: _const_like(x, P["phi2"]),
        phi_mu=lambda x, law, xt: P["phim"] + P["phiS"] * np.asarray(xt, dtype=float),
        phi_xmu=lambda x, law, xt: _const_like(xt, P["phiS"]),
    )
    mean_field = any(P[k] != 0 for k in ("b2", "b3", "s3", "ax", "ay", "phim", "phiS"))
    return ControlProblem(
        name=name, horizon=P["T"], initial_state=P["x0"], control_set=cs,
        drift=drift, diffusion=diffusion, generator=generator, terminal=terminal,
        derivatives=d, quadratic_growth_gamma=P["gamma"],
        bounds=_mflq_bounds(P), params=p, mean_field=mean_field,
    )


def _mflq_bounds(P: dict) -> dict[str, float]:
    # declared on the probe box |x|, |y|, |z| <= 3, |u| <= 2
    return {
        "b_x": abs(P["b1"]) + 2 * abs(P["rho"]), "b_mu": abs(P["b2"]) + 6 * abs(P["b3"]),
        "sigma_mu": abs(P["s3"]), "f_y": abs(P["cy"]), "f_z": 3 * P["gamma"] + 1e-300,
        "phi_xx": abs(P["phi2"]), "f_mu_y": abs(P["ay"]),
    }


# ------------------------------------------------------------ registry

_FAMILIES: dict[str, Callable[..., ControlProblem]] = {}


def register_family(name: str, factory: Callable[..., ControlProblem]) -> None:
    _FAMILIES[name] = factory


def make_problem(name: str, control_values=None, control_interval=None, **params) -> ControlProblem:
    """Build a problem from a registered family with numeric parameters."""
    if name not in _FAMILIES:
        raise KeyError(f"unknown problem family {name!r}; known: {sorted(_FAMILIES)}")
    kw: dict[str, Any] = dict(params)
    if control_values is not None:
        kw["control_set"] = ControlSet(values=tuple(float(v) for v in control_values))
    elif control_interval is not None:
        kw["control_set"] = ControlSet(interval=tuple(float(v) for v in control_interval))
    return _FAMILIES[name](**kw)


def families() -> list[str]:
    return sorted(_FAMILIES)


# ------------------------------------------------------------ oracles


def _ivp(fun, t0, t1, y0, **kw):
    sol = solve_ivp(fun, (t0, t1), np.asarray(y0, dtype=float), method="DOP853",
                    rtol=1e-11, atol=1e-13, dense_output=True, **kw)
    if not sol.success:
        raise RuntimeError(f"oracle ODE failed: {sol.message}")
    return sol


def _piecewise(levels, T):  # used by the open-loop LQ moment formula
    levels = np.asarray(levels, dtype=float)
    edges = np.linspace(0.0, T, levels.size + 1)

    def u_of_t(t):
        idx = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, levels.size - 1)
        return levels[idx]

    return u_of_t, edges


class MFLQOracle:
    """Mean-field-limit ODE oracle for open-loop deterministic controls.

    Forward moments m = E[X], S = E[X^2] and the backward quadratic value
    v(t, x) = A x^2 + B x + C are integrated with a high-order Runge-Kutta
    scheme, piece by piece between control switches.
    """

    def __init__(self, problem: ControlProblem):
        self.problem = problem
        self.P = {k: float(v) for k, v in problem.params.items()}

    def _pieces(self, levels):
        P = self.P
        T = P["T"]
        levels = np.asarray(levels, dtype=float)
        edges = np.linspace(0.0, T, levels.size + 1)
        pts = set(np.round(edges, 14).tolist())
        if 0 < P["t_switch"] < T:
            pts.add(P["t_switch"])
        pts = sorted(pts)
        out = []
        for a, b in zip(pts[:-1], pts[1:]):
            mid = 0.5 * (a + b)
            u = levels[min(int(np.searchsorted(edges, mid, side="right")) - 1, levels.size - 1)]
            c = P["c_pre"] if mid < P["t_switch"] else P["c_post"]
            out.append((a, b, float(u), c))
        return out

    def solve(self, levels):
        """Dense moment and value-coefficient callables plus J = v(0, x0)."""
        P = self.P
        T = P["T"]
        g = P["gamma"]
        pieces = self._pieces(levels)

        def fwd(u):
            def rhs(t, y):
                m, S = y
                mu_phi = P["b0"] + P["b2"] * m + P["b3"] * S + P["bu"] * u
                lin = P["b1"] + P["rho"] * u
                sig = P["s0"] + P["s1"] * u + P["s3"] * m
                return [mu_phi + lin * m, 2 * (mu_phi * m + lin * S) + sig * sig]
            return rhs

        fsols = []
        y = [P["x0"], P["x0"] ** 2]
        for a, b, u, _ in pieces:
            sol = _ivp(fwd(u), a, b, y)
            fsols.append((a, b, sol))
            y = sol.y[:, -1]

        def moment(t):
            for a, b, sol in fsols:
                if t <= b:
                    return sol.sol(min(max(t, a), b))
            return fsols[-1][2].sol(T)

        def bwd(u, c):
            def rhs(t, y):
                A, B, C = y
                m, S = moment(t)
                s2 = (P["s0"] + P["s1"] * u + P["s3"] * m) ** 2
                const_drift = P["b0"] + P["b2"] * m + P["b3"] * S + P["bu"] * u
                lin = P["b1"] + P["rho"] * u
                return [
                    -(2 * A * lin + 2 * g * s2 * A * A + P["cy"] * A + P["qx"]),
                    -(2 * A * const_drift + B * lin + 2 * g * s2 * A * B + P["cy"] * B),
                    -(B * const_drift + s2 * A + 0.5 * g * s2 * B * B + P["cy"] * C
                      + P["ay"] * (A * S + B * m + C) + P["ax"] * m + P["qu"] * u * u + c * u),
                ]
            return rhs

        mT, ST = moment(T)
        y = [0.5 * P["phi2"], P["phi1"], P["phi0"] + P["phim"] * mT + 0.5 * P["phiS"] * ST]
        bsols = []
        for a, b, u, c in reversed(pieces):
            sol = _ivp(bwd(u, c), b, a, y)
            bsols.append((a, b, sol))
            y = sol.y[:, -1]

        def value_coeffs(t):
            for a, b, sol in bsols:
                if a <= t <= b:
                    return sol.sol(t)
            return bsols[-1][2].sol(0.0)

        A0, B0, C0 = value_coeffs(0.0)
        x0 = P["x0"]
        return {"moment": moment, "value_coeffs": value_coeffs,
                "J": float(A0 * x0 * x0 + B0 * x0 + C0)}

    def value(self, levels) -> float:
        return self.solve(levels)["J"]

    def p1(self, levels, t, x):
        """First-order adjoint along the open-loop control: v_x = 2 A x + B."""
        A, B, _ = self.solve(levels)["value_coeffs"](t)
        return 2 * A * np.asarray(x) + B

    def brute_force(self, intervals: int = 4, levels=None):
        """Exhaustive search over controls constant on ``intervals`` equal pieces.

        Returns ``((best_levels, best_J), table)`` with every evaluated control.
        """
        vals = self.problem.control_set.levels() if levels is None else np.asarray(levels)
        table = []
        for combo in itertools.product(vals, repeat=intervals):
            table.append((tuple(float(c) for c in combo), self.value(combo)))
        best = min(table, key=lambda row: row[1])
        return best, table


class RiccatiOracle:
    """Feedback LQ oracle for the classical problem (no law dependence)."""

    def __init__(self, problem: ControlProblem):
        self.problem = problem
        P = {k: float(v) for k, v in problem.params.items()}
        self.P = P
        T, r, cy = P["T"], P["qu"], P["cy"]
        if r <= 0:
            raise ValueError("Riccati oracle needs qu > 0")
        # v = A x^2 + C; A' = A^2/r - qx - cy A with A(T) = p2/2
        sA = _ivp(lambda t, y: [y[0] ** 2 / r - P["qx"] - cy * y[0]], T, 0.0, [0.5 * P["phi2"]])
        self._A = lambda t: float(sA.sol(t)[0])
        sC = _ivp(lambda t, y: [-(P["s0"] ** 2 * self._A(t) + cy * y[0])], T, 0.0, [P["phi0"]])
        self._C = lambda t: float(sC.sol(t)[0])
        sP = _ivp(lambda t, y: [-(cy * y[0] + 2 * P["qx"])], T, 0.0, [P["phi2"]])
        self._P1 = lambda t: float(sP.sol(t)[0])

    def A(self, t):
        return self._A(t)

    def feedback(self, t, x):
        return -self._A(t) * np.asarray(x) / self.P["qu"]

    def value(self, x0=None) -> float:
        x0 = self.P["x0"] if x0 is None else x0
        return self._A(0.0) * x0 * x0 + self._C(0.0)

    def p1(self, t, x):
        return 2 * self._A(t) * np.asarray(x)

    def q11(self, t):
        return 2 * self._A(t) * self.P["s0"]

    def P1(self, t):
        return self._P1(t)

    def open_loop_value(self, levels) -> float:
        """J for a deterministic piecewise-constant control (moment formula)."""
        P = self.P
        T, cy = P["T"], P["cy"]
        u_of_t, edges = _piecewise(levels, T)
        ts = np.linspace(0.0, T, 20001)
        u = u_of_t(ts)
        drift = np.concatenate([[0.0], np.cumsum(0.5 * (u[1:] + u[:-1]) * np.diff(ts))])
        ex2 = (P["x0"] + drift) ** 2 + P["s0"] ** 2 * ts
        run = np.exp(cy * ts) * (P["qx"] * ex2 + P["qu"] * u * u)
        integral = np.sum(0.5 * (run[1:] + run[:-1]) * np.diff(ts))
        return float(np.exp(cy * T) * (P["phi0"] + 0.5 * P["phi2"] * ex2[-1]) + integral)

    def brute_force(self, intervals: int = 4, levels=None):
        vals = self.problem.control_set.levels() if levels is None else np.asarray(levels)
        best = None
        for combo in itertools.product(vals, repeat=intervals):
            J = self.open_loop_value(combo)
            if best is None or J < best[1]:
                best = (tuple(float(c) for c in combo), J)
        return best


class ColeHopfOracle:
    """Y_t = (1/gamma) log E[exp(gamma X_T) | F_t] for X = x0 + B, Phi(x) = x."""

    def __init__(self, problem: ControlProblem):
        self.problem = problem
        self.gamma = float(problem.params["gamma"])
        self.T = float(problem.params["T"])

    def Y(self, t, x):
        return np.asarray(x) + 0.5 * self.gamma * (self.T - t)

    def value(self) -> float:
        return float(self.Y(0.0, self.problem.initial_state))


class MFLinearOracle:
    """Scalar ODE oracle for the mean-field linear problem.

    m' = b0 + (b1 + b2) m and v = A x + C with A' = -(b1 + cy) A,
    C' = -(A (b0 + b2 m) + cy C + ay (A m + C) + ax m). Along this problem the
    adjoints are deterministic when phiS = 0:
    p1 = A, p2' = -(ax + p1 (b2 + ay) + p2 (b1 + cy + b2 + ay)), and
    P2' = -(2 b1 + ay + cy) P2 for any phiS (P1 = 0 because Phi is affine in x).
    """

    def __init__(self, problem: ControlProblem):
        self.problem = problem
        P = {k: float(v) for k, v in problem.params.items()}
        self.P = P
        T = P["T"]

        def fwd(t, y):
            m, S = y
            c = P["b0"] + P["b2"] * m
            return [c + P["b1"] * m, 2 * (c * m + P["b1"] * S) + P["s0"] ** 2]

        self._f = _ivp(fwd, 0.0, T, [P["x0"], P["x0"] ** 2])
        mT, ST = self._f.y[:, -1]

        def bwd(t, y):
            A, C, p2, P2 = y
            m = self._f.sol(t)[0]
            return [
                -(P["b1"] + P["cy"]) * A,
                -(A * (P["b0"] + P["b2"] * m) + P["cy"] * C + P["ay"] * (A * m + C) + P["ax"] * m),
                -(P["ax"] + A * (P["b2"] + P["ay"]) + p2 * (P["b1"] + P["cy"] + P["b2"] + P["ay"])),
                -(2 * P["b1"] + P["ay"] + P["cy"]) * P2,
            ]

        y0 = [P["phi1"], P["phi0"] + P["phim"] * mT + 0.5 * P["phiS"] * ST, P["phim"], P["phiS"]]
        self._b = _ivp(bwd, T, 0.0, y0)

    def mean(self, t) -> float:
        return float(self._f.sol(t)[0])

    def value(self) -> float:
        A, C, _, _ = self._b.sol(0.0)
        return float(A * self.P["x0"] + C)

    def p1(self, t) -> float:
        return float(self._b.sol(t)[0])

    def p2(self, t) -> float:
        return float(self._b.sol(t)[2])

    def P2(self, t) -> float:
        return float(self._b.sol(t)[3])


# ------------------------------------------------------------ catalog


@dataclass
class BenchmarkProblem:
    problem: ControlProblem
    name: str
    oracle: Any
    notes: str = ""


def lq_classical(**kw) -> ControlProblem:
    p = dict(T=1.0, x0=0.5, bu=1.0, s0=0.4, qx=1.0, qu=1.0, cy=0.1, phi2=2.0)
    p.update(kw)
    cs = p.pop("control_set", ControlSet(interval=(-3.0, 3.0)))
    return mflq_problem("lq-classical", control_set=cs, **p)


def pure_quadratic(**kw) -> ControlProblem:
    p = dict(T=1.0, x0=0.0, s0=1.0, gamma=1.0, phi1=1.0)
    p.update(kw)
    cs = p.pop("control_set", ControlSet(values=(0.0,)))
    return mflq_problem("pure-quadratic", control_set=cs, **p)


def mf_linear(**kw) -> ControlProblem:
    p = dict(T=1.0, x0=0.2, b0=0.1, b1=-0.5, b2=0.3, s0=0.5, ay=1.0, cy=1.0, phi0=1.0)
    p.update(kw)
    cs = p.pop("control_set", ControlSet(values=(0.0,)))
    return mflq_problem("mf-linear", control_set=cs, **p)


SPIKE_TEST_PARAMS = dict(
    T=1.0, x0=0.0,
    b1=-1.0, b2=1.0, b3=0.5, bu=0.3, rho=0.2,
    s0=0.6, s1=0.25, s3=0.3,
    gamma=0.5, cy=0.2, ax=0.1, ay=0.3, c_pre=-1.0, c_post=1.0, t_switch=0.5,
    phi2=0.5, phim=0.2, phiS=0.2,
)


def spike_test(**kw) -> ControlProblem:
    p = dict(SPIKE_TEST_PARAMS)
    p.update(kw)
    cs = p.pop("control_set", ControlSet(values=(-1.0, 1.0)))
    return mflq_problem("spike-test", control_set=cs, **p)


register_family("mf-lq", mflq_problem)
register_family("lq-classical", lq_classical)
register_family("pure-quadratic", pure_quadratic)
register_family("mf-linear", mf_linear)
register_family("spike-test", spike_test)


def oracle_for(problem: ControlProblem):
    if problem.name == "lq-classical":
        return RiccatiOracle(problem)
    if problem.name == "pure-quadratic":
        return ColeHopfOracle(problem)
    if problem.name == "mf-linear":
        return MFLinearOracle(problem)
    return MFLQOracle(problem)


def catalog() -> list[BenchmarkProblem]:
    out = []
    for name, notes in [
        ("lq-classical", "no law dependence; Riccati feedback oracle and open-loop brute force"),
        ("pure-quadratic", "Cole-Hopf closed form, Y0 = x0 + gamma T / 2"),
        ("mf-linear", "coupled scalar ODEs for E[X], Y and the deterministic adjoints"),
        ("spike-test", "U = {-1, +1}; moment/Riccati ODE oracle, brute force over 4 intervals"),
    ]:
        prob = make_problem(name)
        out.append(BenchmarkProblem(prob, name, oracle_for(prob), notes))
    return out


def get_benchmark(name: str, **params) -> BenchmarkProblem:
    prob = make_problem(name, **params)
    return BenchmarkProblem(prob, name, oracle_for(prob))


# ------------------------------------------------------------ derivative checks


class DerivativeCheckError(RuntimeError):
    pass


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def check_derivatives(problem: ControlProblem, probe_count: int = 8, seed: int = 0,
                      h: float = 1e-4, law_size: int = 10_000) -> dict[str, float]:
    """Worst relative error of every bundle entry against finite differences.

    State, control-free directions use centred differences; measure directions
    shift the atoms of an empirical law by ``h * eta`` and compare with
    ``E[d_mu g(., xi) eta]``. Relative error is ``|a - b| / max(1, |b|)``.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = np.random.default_rng(seed)
    d = problem.derivatives
    T = problem.horizon
    err: dict[str, float] = {}

    def upd(key, a, b):
        err[key] = max(err.get(key, 0.0), _rel(a, b))

    def guard(label, point, fn):
        try:
            return fn()
        except Exception as exc:  # pragma: no cover - diagnostic path
            raise DerivativeCheckError(f"{label} failed at {point}: {exc}") from exc

    atoms = rng.normal(size=law_size)
    atoms_y = rng.normal(size=law_size)
    eta = rng.normal(size=law_size)
    zeta = rng.normal(size=law_size)
    law = EmpiricalMeasure(atoms)
    law2 = EmpiricalMeasure(np.column_stack([atoms, atoms_y]))
    lawp, lawm = law.shifted(h * eta), law.shifted(-h * eta)
    law2xp = law2.shifted(np.column_stack([h * eta, 0 * eta]))
    law2xm = law2.shifted(np.column_stack([-h * eta, 0 * eta]))
    law2yp = law2.shifted(np.column_stack([0 * zeta, h * zeta]))
    law2ym = law2.shifted(np.column_stack([0 * zeta, -h * zeta]))

    for _ in range(probe_count):
        t = float(rng.uniform(0, T))
        x = float(rng.normal())
        y = float(rng.normal())
        z = float(rng.normal())
        xt = float(rng.normal())
        yt = float(rng.normal())
        u = float(problem.control_set.sample(rng))
        pt = dict(t=t, x=x, y=y, z=z, u=u)

        for base, dx, dxx, dmu, dxmu, lbl in [
            (problem.drift, d.b_x, d.b_xx, d.b_mu, d.b_xmu, "b"),
            (problem.diffusion, d.sigma_x, d.sigma_xx, d.sigma_mu, d.sigma_xmu, "sigma"),
        ]:
            g = lambda xx, ll=law: np.asarray(base(t, xx, ll, u), dtype=float)
            fd = (g(x + h) - g(x - h)) / (2 * h)
            upd(f"{lbl}_x", guard(f"{lbl}_x", pt, lambda: dx(t, x, law, u)), fd)
            fd2 = (np.asarray(dx(t, x + h, law, u)) - np.asarray(dx(t, x - h, law, u))) / (2 * h)
            upd(f"{lbl}_xx", guard(f"{lbl}_xx", pt, lambda: dxx(t, x, law, u)), fd2)
            fdm = (g(x, lawp) - g(x, lawm)) / (2 * h)
            an = np.mean(np.asarray(dmu(t, x, law, u, atoms), dtype=float) * eta)
            upd(f"{lbl}_mu", guard(f"{lbl}_mu", pt, lambda: an), fdm)
            fdk = (np.asarray(dmu(t, x, law, u, xt + h)) - np.asarray(dmu(t, x, law, u, xt - h))) / (2 * h)
            upd(f"{lbl}_xmu", guard(f"{lbl}_xmu", pt, lambda: dxmu(t, x, law, u, xt)), fdk)

        F = lambda xx, yy, zz, ll=law2: float(np.asarray(problem.generator(t, xx, yy, zz, ll, u)))
        grads = [d.f_x, d.f_y, d.f_z]
        fds = [
            (F(x + h, y, z) - F(x - h, y, z)) / (2 * h),
            (F(x, y + h, z) - F(x, y - h, z)) / (2 * h),
            (F(x, y, z + h) - F(x, y, z - h)) / (2 * h),
        ]
        for name, gfun, fdv in zip(["f_x", "f_y", "f_z"], grads, fds):
            upd(name, guard(name, pt, lambda: gfun(t, x, y, z, law2, u)), fdv)
        H = guard("f_hess", pt, lambda: d.f_hess(t, x, y, z, law2, u))
        Hm = np.array([[H[0], H[1], H[2]], [H[1], H[3], H[4]], [H[2], H[4], H[5]]], dtype=float)
        shifts = np.eye(3) * h
        for c in range(3):
            xp, yp, zp = np.array([x, y, z]) + shifts[c]
            xm, ym, zm = np.array([x, y, z]) - shifts[c]
            col = [(float(np.asarray(gfun(t, xp, yp, zp, law2, u))) - float(np.asarray(gfun(t, xm, ym, zm, law2, u)))) / (2 * h)
                   for gfun in grads]
            upd("f_hess", Hm[:, c], np.array(col))
        fmx, fmy = guard("f_mu", pt, lambda: d.f_mu(t, x, y, z, law2, u, atoms, atoms_y))
        fdx = (F(x, y, z, law2xp) - F(x, y, z, law2xm)) / (2 * h)
        fdy = (F(x, y, z, law2yp) - F(x, y, z, law2ym)) / (2 * h)
        upd("f_mu_x", np.mean(np.broadcast_to(fmx, atoms.shape) * eta), fdx)
        upd("f_mu_y", np.mean(np.broadcast_to(fmy, atoms.shape) * zeta), fdy)
        J = guard("f_mu_jac", pt, lambda: d.f_mu_jac(t, x, y, z, law2, u, xt, yt))
        mx_p = d.f_mu(t, x, y, z, law2, u, xt + h, yt)
        mx_m = d.f_mu(t, x, y, z, law2, u, xt - h, yt)
        my_p = d.f_mu(t, x, y, z, law2, u, xt, yt + h)
        my_m = d.f_mu(t, x, y, z, law2, u, xt, yt - h)
        fdJ = [
            (np.asarray(mx_p[0]) - np.asarray(mx_m[0])) / (2 * h),
            (np.asarray(my_p[0]) - np.asarray(my_m[0])) / (2 * h),
            (np.asarray(mx_p[1]) - np.asarray(mx_m[1])) / (2 * h),
            (np.asarray(my_p[1]) - np.asarray(my_m[1])) / (2 * h),
        ]
        upd("f_mu_jac", np.array([np.asarray(v, dtype=float) for v in J]), np.array(fdJ, dtype=float))

        G = lambda xx, ll=law: float(np.asarray(problem.terminal(xx, ll)))
        upd("phi_x", d.phi_x(x, law), (G(x + h) - G(x - h)) / (2 * h))
        upd("phi_xx", d.phi_xx(x, law), (np.asarray(d.phi_x(x + h, law)) - np.asarray(d.phi_x(x - h, law))) / (2 * h))
        upd("phi_mu", np.mean(np.asarray(d.phi_mu(x, law, atoms), dtype=float) * eta),
            (G(x, lawp) - G(x, lawm)) / (2 * h))
        upd("phi_xmu", d.phi_xmu(x, law, xt),
            (np.asarray(d.phi_mu(x, law, xt + h)) - np.asarray(d.phi_mu(x, law, xt - h))) / (2 * h))
    return err

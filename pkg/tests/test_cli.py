import csv
import json
import math

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from mfsmp.cli import ConfigError, RunConfig, fit_rate, main, run

EPS = [0.2, 0.1, 0.05, 0.025]


# ----------------------------------------------------------------- fit_rate


def test_fit_rate_exact_power_law():
    fit = fit_rate([(e, e ** 2) for e in EPS])
    assert fit.slope == pytest.approx(2.0, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.slope_se == pytest.approx(0.0, abs=1e-10)


def test_fit_rate_constant_statistic():
    assert fit_rate([(e, 3.0) for e in EPS]).slope == pytest.approx(0.0, abs=1e-12)


def test_fit_rate_needs_four_positive_points():
    with pytest.raises(ValueError):
        fit_rate([(e, e) for e in EPS[:3]])
    with pytest.raises(ValueError):
        fit_rate([(0.2, 1.0), (0.1, 0.0), (0.05, 1.0), (0.025, 1.0)])


@given(st.floats(-3, 3), st.floats(0.01, 100.0), st.lists(st.floats(-0.05, 0.05), min_size=4, max_size=4))
def test_fit_rate_recovers_perturbed_slopes(a, c, noise):
    fit = fit_rate([(e, c * e ** a * math.exp(n)) for e, n in zip(EPS, noise)])
    # log-noise of at most 0.05 over a log-range of ln 8 moves the slope by at most 0.1 / ln 2
    assert abs(fit.slope - a) <= 0.1 / math.log(2) + 1e-9
    assert fit.slope_se >= 0


# ------------------------------------------------------------------- config


def test_config_errors_name_the_field():
    with pytest.raises(ConfigError, match=r"config\.seeds\[1\]"):
        RunConfig.from_dict({"seeds": [0, -2]})
    with pytest.raises(ConfigError, match=r"config\.params\.b1"):
        RunConfig.from_dict({"problem": "mf-lq", "params": {"b1": "x"}})
    with pytest.raises(ConfigError, match="unknown field"):
        RunConfig.from_dict({"colour": "blue"})
    with pytest.raises(ConfigError, match=r"config\.problem"):
        RunConfig.from_dict({"problem": "nope"})


def test_epsilons_are_rounded_to_the_grid():
    cfg = RunConfig.from_dict({"steps": 100, "epsilons": [0.2, 0.0549]})
    assert cfg.rounded_epsilons() == pytest.approx([0.2, 0.05])


def test_infinite_thresholds_round_trip(tmp_path):
    cfg = RunConfig.from_dict({"M_list": [1.0, ".inf"]})
    assert cfg.M_list == [1.0, math.inf]
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert RunConfig.load(path).M_list == [1.0, math.inf]


# ---------------------------------------------------------------------- run


def small(**kw):
    base = {"n_particles": 2000, "steps": 50, "seeds": [0], "n_pairs": 16}
    base.update(kw)
    return RunConfig.from_dict(base)


def test_solve_reports_oracle_gap(tmp_path):
    code, run_dir, summary = run(small(problem="pure-quadratic", n_particles=20_000), "solve", tmp_path)
    assert code == 0
    assert summary["seed0"]["oracle_gap"] < 0.02
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["command"] == "solve" and manifest["versions"]["backend"] in ("numba", "numpy")
    with open(run_dir / "backward.csv") as fh:
        assert next(csv.reader(fh)) == ["seed", "node", "t", "mean_Y", "second_moment_Z"]


def test_smp_check_on_control_free_problem_exits_zero(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"problem": "pure-quadratic", "control_interval": [-1.0, 1.0],
                                   "n_particles": 500, "steps": 20, "n_pairs": 8, "seeds": [0, 1]}))
    assert main(["smp-check", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert "PASS  smp_no_persistent_violation" in capsys.readouterr().out


def test_rates_command_second_order_gap(tmp_path):
    code, _, summary = run(small(problem="spike-test", n_particles=4000, steps=200), "rates", tmp_path)
    fit = summary["seed0"]["first_order_gap"]
    assert abs(fit["slope"] - 2.0) <= 0.3
    assert code == 0


def test_bad_config_exits_two(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("steps: -3\n")
    assert main(["solve", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "config.steps" in capsys.readouterr().err


def test_failed_assertion_exits_one(tmp_path):
    # a deliberately wrong constant control on the spike problem fails the SMP check
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"problem": "spike-test", "control": 1.0, "n_particles": 2000, "steps": 20,
                                   "n_pairs": 16, "seeds": [0, 1]}))
    assert main(["smp-check", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_manifest_replays_bit_for_bit(tmp_path, monkeypatch):
    cfg = small(problem="spike-test", seeds=[0, 1])
    monkeypatch.setenv("MFSMP_WORKERS", "1")
    _, d1, _ = run(cfg, "solve", tmp_path / "a")
    monkeypatch.setenv("MFSMP_WORKERS", "2")
    assert main(["solve", "--config", str(d1 / "manifest.json"), "--out", str(tmp_path / "b")]) in (0, 1)
    d2 = tmp_path / "b" / d1.name
    assert (d1 / "backward.csv").read_bytes() == (d2 / "backward.csv").read_bytes()
    s1, s2 = (json.loads((d / "summary.json").read_text()) for d in (d1, d2))
    assert s1["seed0"]["Y0"] == s2["seed0"]["Y0"] and s1["seed1"]["Y0"] == s2["seed1"]["Y0"]


def test_adjoint_pair_dump_is_optional(tmp_path):
    _, d, _ = run(small(problem="spike-test", steps=20), "adjoint", tmp_path)
    assert not list(d.glob("pairs_*.npz"))
    _, d, _ = run(small(problem="spike-test", steps=20, dump_pairs=True), "adjoint", tmp_path / "x")
    with np.load(next(d.glob("pairs_*.npz"))) as z:
        assert z["p2"].shape == (21, 16, 16)

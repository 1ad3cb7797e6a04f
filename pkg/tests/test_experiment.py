import csv
import json
import math
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# Ensure repo root is on PYTHONPATH for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from snell.config import default_config
from snell.errors import ConfigError, DomainError, ExperimentError
from snell.experiment import (CSV_HEADER, ExperimentConfig, decreasing_within_se, e2_bound, fbm_coupling_study,
                              fbm_terminal_variance, loglog_slope, make_phi, plan_steps, rate_term, run_experiment)
from snell.oracles import legendre_i_star


def _small_put_config(tmp_path, **experiment):
    cfg = default_config()
    cfg["experiment"].update({"k_list": [1, 2], "train_paths": 2000, "fresh_paths": 2000, "seed": 11})
    cfg["experiment"].update(experiment)
    cfg["reference"]["steps"] = 400
    cfg["runtime"]["output_dir"] = str(tmp_path)
    return cfg


def test_plan_steps_examples():
    phi = make_phi("pow2")
    assert plan_steps(phi, 0.40, 0.15, hurst=0.6) == (1.88, 14)
    k_star, steps = plan_steps(phi, 0.20, 0.15, hurst=0.6)
    assert (k_star, steps) == (3.31, 99)


def test_plan_steps_rejects_bad_inputs():
    phi = make_phi("pow2")
    with pytest.raises(DomainError):
        plan_steps(phi, 1.5, 0.15)
    with pytest.raises(DomainError):
        plan_steps(phi, 0.4, 0.05, hurst=0.6)
    with pytest.raises(DomainError):
        plan_steps(phi, 0.4, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=0.02, max_value=0.6), st.floats(min_value=0.02, max_value=0.6))
def test_plan_steps_monotone_in_target(a, b):
    phi = make_phi("pow2")
    lo, hi = sorted((a, b))
    assert plan_steps(phi, lo, 0.15)[1] >= plan_steps(phi, hi, 0.15)[1]


def test_custom_phi_rounds_level_up():
    phi = make_phi("custom", [0.5, 0.3, 0.2, 0.1])
    assert phi(2) == 0.3
    k_star, steps = plan_steps(phi, 0.25, 0.0)
    assert k_star == 3.0
    assert steps == math.ceil(1.0 / 0.2 ** 2)
    with pytest.raises(DomainError):
        phi(5)
    with pytest.raises(DomainError):
        make_phi("custom", [0.1, 0.2, 0.3])
    with pytest.raises(DomainError):
        make_phi("custom", [0.5, 0.0])


def test_loglog_slope_recovers_power():
    eps = [0.5, 0.25, 0.125, 0.0625]
    assert loglog_slope(eps, [3.0 * e ** 0.8 for e in eps]) == pytest.approx(0.8)
    assert loglog_slope(eps[:1], [1.0]) is None
    assert loglog_slope(eps, [0.0, 0.0, 0.1, None]) is None


def test_e2_bound_formula():
    assert e2_bound(10 ** 4, 16) == pytest.approx(math.log(10 ** 4) * (10 ** 4) ** (-2.0 / 17.0))
    assert e2_bound(10 ** 5, 16) < e2_bound(10 ** 4, 16)


def test_rate_term_by_model(tmp_path):
    markov = ExperimentConfig.from_dict(_small_put_config(tmp_path))
    eps = 0.25
    expected = eps + math.exp(-legendre_i_star(0.9) / eps ** 2) + 0.1 * math.log(20.0)
    assert rate_term(markov, eps) == pytest.approx(expected)

    cfg = _small_put_config(tmp_path, model="fbm_drift")
    cfg["reference"]["kind"] = "self"
    fbm = ExperimentConfig.from_dict(cfg)
    assert rate_term(fbm, eps) == pytest.approx(eps ** 0.7)


def test_config_errors_surface_as_config_error(tmp_path):
    cfg = _small_put_config(tmp_path, k_list=[])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(cfg)
    cfg = _small_put_config(tmp_path)
    cfg["basis"]["family"] = "spline"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(cfg)
    cfg = _small_put_config(tmp_path)
    del cfg["experiment"]["horizon"]
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(cfg)


def test_markov_run_writes_report(tmp_path, capsys):
    cfg = ExperimentConfig.from_dict(_small_put_config(tmp_path))
    report = run_experiment(cfg)

    with open(tmp_path / "report.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == CSV_HEADER
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert [r[2] for r in rows[1:]] == ["4", "16"]
    assert all(r[8] == "crr" for r in rows[1:])
    assert rows[1][11] == ""
    assert float(rows[2][11]) == pytest.approx(abs(report.rows[1].value - report.rows[0].value), rel=1e-10)
    for row in report.rows:
        assert row.lower <= row.value + 3.0 * row.lower_se, f"k={row.k}: lower {row.lower} vs {row.value}"
        assert row.abs_error == pytest.approx(abs(row.value - row.reference))

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["reference_kind"] == "crr"
    assert summary["k_list"] == [1, 2]
    assert summary["consecutive_differences"] == [report.rows[1].consecutive_diff]
    assert summary["error_decreasing"] == report.error_decreasing
    assert summary["differences_shrinking"] is None
    assert (tmp_path / "models_k1.json").exists() and (tmp_path / "models_k2.json").exists()
    assert "[run] k=2" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        run_experiment(ExperimentConfig.from_dict(_small_put_config(out)))
    assert (first / "report.csv").read_bytes() == (second / "report.csv").read_bytes()
    assert (first / "models_k2.json").read_bytes() == (second / "models_k2.json").read_bytes()


def test_levels_run_coarse_to_fine(tmp_path):
    report = run_experiment(ExperimentConfig.from_dict(_small_put_config(tmp_path, k_list=[2, 1])))
    assert [r.k for r in report.rows] == [1, 2]


def test_fbm_run_uses_self_reference(tmp_path):
    cfg = _small_put_config(tmp_path, model="fbm_drift", x0=0.0, train_paths=200, fresh_paths=200)
    cfg["model"].update({"drift": "bounded", "drift_params": [-1.0, 1.0], "vol": "zero", "vol_params": []})
    cfg["payoff"] = {"name": "capped_put", "params": [0.2, 1.0]}
    cfg["reference"] = {"kind": "self"}
    report = run_experiment(ExperimentConfig.from_dict(cfg))
    assert report.reference_kind == "self-ref"
    assert report.rows[-1].abs_error == 0.0
    assert report.reference_value == report.rows[-1].value
    assert json.loads((tmp_path / "summary.json").read_text())["reference_kind"] == "self-ref"
    assert report.error_decreasing is None
    assert report.rows[1].consecutive_diff == pytest.approx(abs(report.rows[1].value - report.rows[0].value))


def test_numeric_failure_carries_stage_tag(tmp_path):
    cfg = _small_put_config(tmp_path, k_list=[1])
    cfg["model"] = {"drift": "linear_drift", "drift_params": [1e308], "vol": "zero", "vol_params": []}
    cfg["experiment"]["x0"] = 1e308
    with pytest.raises(ExperimentError) as info:
        run_experiment(ExperimentConfig.from_dict(cfg))
    assert info.value.stage_tag == "k=1 block=train stage=state"


@pytest.mark.slow
def test_driver_terminal_variance_and_negative_control():
    var = fbm_terminal_variance(0.6, 0.0625, 4000, seed=5)
    assert abs(var - 1.0) < 0.08, f"Var B_H(1) = {var}"
    corrupted = fbm_terminal_variance(0.6, 0.0625, 4000, seed=5, norm_scale=1.1)
    assert abs(corrupted - 1.0) > 0.1, f"miscalibrated constant went unnoticed: {corrupted}"


@pytest.mark.slow
def test_coupling_error_shrinks_with_eps():
    study = fbm_coupling_study(0.6, (0.25, 0.125), n_paths=20, seed=3, dt=1e-4)
    assert study.strictly_decreasing, f"errors {study.mean_sup_error}"


def test_decreasing_within_se():
    assert decreasing_within_se([0.3, 0.1, 0.05], [0.01, 0.01, 0.01])
    assert decreasing_within_se([0.1, 0.12], [0.01, 0.01])
    assert not decreasing_within_se([0.1, 0.2], [0.01, 0.01])
    assert decreasing_within_se([0.1], [0.01]) is None

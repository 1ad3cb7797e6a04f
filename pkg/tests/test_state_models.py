import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# Ensure repo root is on PYTHONPATH for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from snell.errors import DomainError, NumericError
from snell.fbm_kernel import FbmParams, driver_from_skeleton, drivers_for_batch, with_calibration
from snell.oracles import euler_uniform_grid
from snell.rng import path_stream
from snell.skeleton import SkeletonConfig, build_skeleton, num_steps, simulate_skeletons, skeleton_from_events
from snell.state_models import (CoefficientSpec, PathView, drifted_fbm_path, euler_path, make_coefficients,
                                make_drift, make_payoff, reward_path)


def _hand_skeleton(deltas, signs, eps=0.5):
    deltas = np.asarray(deltas, dtype=float)
    return skeleton_from_events(eps, 1, deltas, np.zeros(deltas.size, dtype=np.int64),
                                np.asarray(signs, dtype=np.int8))


def test_degenerate_coefficients_keep_x0():
    s = build_skeleton(SkeletonConfig(0.25), 16, path_stream(1, 0))
    spec = make_coefficients("zero", (), "zero", ())
    x = euler_path(spec, s, 2.5, 16)
    assert np.all(x.values == 2.5)


def test_unit_vol_reproduces_walk():
    s = build_skeleton(SkeletonConfig(0.25), 16, path_stream(2, 0))
    x = euler_path(make_coefficients("zero", (), "constant", (1.0,)), s, 1.0, 16)
    assert np.allclose(x.values[0], 1.0 + s.walks[0])
    assert x.values[0, 0] == 1.0


def test_euler_uses_left_endpoint():
    s = _hand_skeleton([0.1, 0.2], [1, -1])
    x = euler_path(make_coefficients("linear_drift", (1.0,), "linear", (0.5,)), s, 2.0, 2)
    x1 = 2.0 + 2.0 * 0.1 + 0.5 * 2.0 * 0.5
    x2 = x1 + x1 * 0.2 - 0.5 * x1 * 0.5
    assert np.allclose(x.values[0], [2.0, x1, x2])


def test_non_finite_coefficient_reports_stage():
    s = _hand_skeleton([0.1, 0.2, 0.3], [1, 1, 1])
    spec = CoefficientSpec(drift=lambda t, w: np.where(w.stage >= 2, np.inf, 0.0) * np.ones(t.shape),
                           vol=make_coefficients("zero").vol)
    with pytest.raises(NumericError) as info:
        euler_path(spec, s, 0.0, 3)
    assert info.value.stage == 3


def test_functionals_ignore_the_future():
    rng = np.random.default_rng(0)
    times = np.cumsum(rng.random((5, 8)), axis=1)
    values = rng.standard_normal((5, 8))
    perturbed = values.copy()
    perturbed[:, 5:] = rng.standard_normal((5, 3))
    t = times[:, 4]
    for fn in (make_payoff("lookback_put", (0.1,)), make_drift("path_mean", (2.0,)), make_payoff("put", (0.0, 0.0))):
        a = fn(t, PathView(times[:, :5], values[:, :5]))
        b = fn(t, PathView(times[:, :5], perturbed[:, :5]))
        assert np.array_equal(a, b)


def test_path_view_queries():
    view = PathView(np.array([[0.0, 1.0, 3.0]]), np.array([[1.0, 4.0, 2.0]]))
    assert view.stage == 2
    assert view.at(2.0)[0] == 4.0
    assert view.at(0.5)[0] == 1.0
    assert view.running_max()[0] == 4.0
    assert view.running_min()[0] == 1.0
    assert view.time_average()[0] == pytest.approx((1.0 * 1.0 + 4.0 * 2.0) / 3.0)


def test_registry_rejects_unknown_names():
    with pytest.raises(DomainError):
        make_payoff("digital")
    with pytest.raises(DomainError):
        make_drift("bounded", (1.0,))


def test_freeze_after_horizon():
    s = _hand_skeleton([0.2, 0.3, 0.4, 0.5, 0.1, 0.1], [1, 1, -1, 1, 1, -1])
    x = euler_path(make_coefficients("zero", (), "constant", (1.0,)), s, 0.0, 6)
    r = reward_path(make_payoff("identity"), x, s, 1.0, 6)
    # t_3 = 0.9 <= 1 < t_4 = 1.4
    assert r.frozen_index() == 4
    assert np.all(r.values[0, 4:] == r.values[0, 3])
    assert np.array_equal(r.values[0, :4], x.values[0, :4])


def test_no_freeze_inside_horizon():
    s = _hand_skeleton([0.1, 0.1], [1, 1])
    x = euler_path(make_coefficients("zero", (), "constant", (1.0,)), s, 0.0, 2)
    r = reward_path(make_payoff("identity"), x, s, 1.0, 2)
    assert r.frozen_index() is None


def test_lookback_reward_is_running_max():
    s = build_skeleton(SkeletonConfig(0.25), 20, path_stream(3, 0))
    x = euler_path(make_coefficients("zero", (), "constant", (1.0,)), s, 0.0, 20)
    r = reward_path(make_payoff("lookback_max"), x, s, 100.0, 20)
    assert np.array_equal(r.values[0], np.maximum.accumulate(x.values[0]))


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=0.0, max_value=3.0))
def test_freeze_rule_is_idempotent(horizon):
    batch = simulate_skeletons(SkeletonConfig(0.5), 12, 4, seed=4)
    x = euler_path(make_coefficients("zero", (), "constant", (1.0,)), batch, 0.0, 12)
    once = reward_path(make_payoff("identity"), x, batch, horizon, 12)
    again = reward_path(make_payoff("identity"), type(x)(0.0, once.values, x.times), batch, horizon, 12)
    assert np.array_equal(once.values, again.values)
    for i in range(4):
        f = once.frozen_index(i)
        if f is not None:
            assert np.all(once.values[i, f:] == once.values[i, f - 1])


def test_pure_fbm_driver_path():
    p = with_calibration(FbmParams(0.6))
    s = build_skeleton(SkeletonConfig(0.25), 16, path_stream(5, 0))
    drv = driver_from_skeleton(p, s, 16)
    x = drifted_fbm_path(make_coefficients("zero"), drv, s, 0.3, 16)
    assert np.allclose(x.values[0], 0.3 + drv.grid_values)


def test_bounded_drift_bound_holds():
    p = with_calibration(FbmParams(0.6))
    batch = simulate_skeletons(SkeletonConfig(0.25), 16, 20, seed=6)
    grid = drivers_for_batch(p, batch, 16)
    x = drifted_fbm_path(make_coefficients("bounded", (-1.0, 1.0)), grid, batch, 0.5, 16)
    bound = 0.5 + x.times + np.max(np.abs(grid), axis=1, keepdims=True)
    assert np.all(np.isfinite(x.values))
    assert np.all(np.abs(x.values) <= bound + 1e-12)


def test_driver_shape_mismatch():
    batch = simulate_skeletons(SkeletonConfig(0.25), 8, 3, seed=7)
    with pytest.raises(DomainError):
        drifted_fbm_path(make_coefficients("zero"), np.zeros((2, 9)), batch, 0.0, 8)



def test_reward_path_reads_times_from_skeleton():
    s = _hand_skeleton([0.2, 0.3, 0.4, 0.5, 0.1, 0.1], [1, 1, -1, 1, 1, -1])
    x = euler_path(make_coefficients("zero", (), "constant", (1.0,)), s, 0.0, 6)
    r = reward_path(make_payoff("lookback_max"), x, None, 1.0, 6)
    assert np.array_equal(reward_path(make_payoff("lookback_max"), x, s, 1.0, 6).values, r.values)
    other = simulate_skeletons(SkeletonConfig(0.5), 6, 2, seed=1)
    with pytest.raises(DomainError):
        reward_path(make_payoff("identity"), x, other, 1.0, 6)


@pytest.mark.slow
def test_state_driven_drift_matches_uniform_grid_euler():
    # drift(t, w) = w(t) with unit volatility; terminal value read at the last grid time <= 1
    eps, n_paths = 0.0625, 10_000
    steps = 2 * num_steps(eps, 1.0)
    batch = simulate_skeletons(SkeletonConfig(eps, seed=31), steps, n_paths)
    x = euler_path(make_coefficients("linear_drift", (1.0,), "constant", (1.0,)), batch, 1.0, steps)
    terminal = reward_path(make_payoff("identity"), x, batch, 1.0, steps).values[:, -1]
    assert np.all(batch.times[:, -1] > 1.0)

    fine = euler_uniform_grid(lambda t, v: v, lambda t, v: np.ones_like(v), 1.0, 1.0, 1e-4, n_paths,
                              np.random.default_rng(32))
    se = np.sqrt(terminal.var(ddof=1) / n_paths + fine.var(ddof=1) / n_paths)
    gap = abs(terminal.mean() - fine.mean())
    assert gap <= 3.0 * se, f"skeleton mean {terminal.mean():.4f} vs grid mean {fine.mean():.4f} (SE {se:.4f})"

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# Ensure repo root is on PYTHONPATH for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from snell.errors import DomainError
from snell.fbm_kernel import (FbmParams, calibrate_norm_const, driver_from_skeleton, driver_value_at,
                              drivers_for_batch, kernel_K, kernel_values, kernel_variance, with_calibration)
from snell.oracles import kernel_closed_form, nualart_norm_const
from snell.rng import path_stream
from snell.skeleton import SkeletonConfig, build_skeleton, simulate_skeletons, skeleton_from_events


@pytest.fixture(scope="module")
def calibrated():
    return {h: with_calibration(FbmParams(h)) for h in (0.6, 0.75)}


def test_kernel_vanishes_on_diagonal():
    assert kernel_K(FbmParams(0.7), 1.0, 1.0) == 0.0


def test_kernel_matches_hypergeometric_form():
    p = FbmParams(0.75, norm_const=nualart_norm_const(0.75))
    s = np.array([1e-4, 0.01, 0.25, 0.5, 0.99])
    ours = kernel_values(p, 1.0, s)
    ref = kernel_closed_form(0.75, 1.0, s)
    assert np.allclose(ours, ref, rtol=1e-8, atol=0.0), f"max rel err {np.max(np.abs(ours / ref - 1))}"


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=0.51, max_value=0.95), st.floats(min_value=1e-3, max_value=0.999))
def test_kernel_positive_inside(h, frac):
    assert kernel_K(FbmParams(h), 2.0, 2.0 * frac) > 0


def test_kernel_domain_errors():
    p = FbmParams(0.6)
    with pytest.raises(DomainError):
        kernel_K(p, 1.0, 0.0)
    with pytest.raises(DomainError):
        kernel_K(p, 1.0, 1.5)
    with pytest.raises(DomainError):
        kernel_K(FbmParams(0.5), 1.0, 0.5)
    with pytest.raises(DomainError):
        FbmParams(1.0)


def test_calibration_matches_closed_form_constant(calibrated):
    for h, p in calibrated.items():
        assert abs(p.norm_const / nualart_norm_const(h) - 1.0) < 1e-6, f"H={h}"
        assert abs(kernel_variance(p, 1.0) - 1.0) < 1e-6


def test_calibrated_variance_scales_like_t_power(calibrated):
    p = calibrated[0.6]
    assert abs(kernel_variance(p, 0.5) - 0.5 ** 1.2) < 1e-4


def test_calibration_stable_under_finer_quadrature():
    coarse = calibrate_norm_const(FbmParams(0.7, quad_order=32))
    fine = calibrate_norm_const(FbmParams(0.7, quad_order=64))
    assert abs(coarse / fine - 1.0) < 1e-6


def test_driver_zero_before_second_event(calibrated):
    p = calibrated[0.6]
    s = build_skeleton(SkeletonConfig(0.25), 10, path_stream(1, 0))
    drv = driver_from_skeleton(p, s, 10)
    assert drv.grid_values[0] == 0.0
    assert drv.grid_values[1] == 0.0
    empty = driver_from_skeleton(p, s, 0)
    assert np.array_equal(empty.grid_values, np.zeros(1))


def test_driver_is_telescoped_closed_form_kernel(calibrated):
    p = calibrated[0.75]
    s = build_skeleton(SkeletonConfig(0.25), 20, path_stream(2, 0))
    drv = driver_from_skeleton(p, s, 20)
    for m in (2, 7, 20):
        t = s.times[m - 1]
        k = kernel_closed_form(0.75, t, s.times[:m], p.norm_const)
        expected = float(np.dot(s.walks[0, 1:m], np.diff(k)))
        assert abs(drv.grid_values[m] - expected) < 1e-6, f"m={m}"
        assert drv.grid_values[m] == pytest.approx(driver_value_at(p, s, m), abs=1e-12)


def test_driver_stable_under_quadrature_order(calibrated):
    p = calibrated[0.6]
    s = build_skeleton(SkeletonConfig(0.25), 16, path_stream(3, 0))
    base = driver_from_skeleton(p, s, 16).grid_values
    finer = driver_from_skeleton(FbmParams(0.6, 48, p.norm_const), s, 16).grid_values
    assert np.max(np.abs(base - finer)) < 1e-7


def test_brownian_case_uses_walk():
    s = build_skeleton(SkeletonConfig(0.25), 8, path_stream(4, 0))
    drv = driver_from_skeleton(FbmParams(0.5), s, 8)
    assert np.array_equal(drv.grid_values, s.walks[0])


def test_driver_rejects_multidimensional_skeleton(calibrated):
    s = build_skeleton(SkeletonConfig(0.25, dim=2), 8, path_stream(5, 0))
    with pytest.raises(DomainError):
        driver_from_skeleton(calibrated[0.6], s, 4)


def test_batch_drivers_match_single_paths(calibrated):
    p = calibrated[0.6]
    batch = simulate_skeletons(SkeletonConfig(0.25), 12, 6, seed=9)
    grid = drivers_for_batch(p, batch, 12, threads=2)
    assert grid.shape == (6, 13)
    assert np.allclose(grid[4], driver_from_skeleton(p, batch.skeleton(4), 12).grid_values)


def test_driver_on_hand_built_skeleton(calibrated):
    p = calibrated[0.6]
    s = skeleton_from_events(0.5, 1, np.array([0.2, 0.3, 0.5]), np.zeros(3, dtype=np.int64),
                             np.array([1, 1, -1], dtype=np.int8))
    # B(T_3) = A(T_1)[K(1, T_2) - K(1, T_1)] + A(T_2)[K(1, T_3) - K(1, T_2)]
    k = kernel_closed_form(0.6, 1.0, np.array([0.2, 0.5, 1.0]), p.norm_const)
    expected = 0.5 * (k[1] - k[0]) + 1.0 * (k[2] - k[1])
    assert driver_value_at(p, s, 3) == pytest.approx(expected, abs=1e-7)

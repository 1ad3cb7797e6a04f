import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure repo root is on PYTHONPATH for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from snell.errors import CouplingError, DomainError
from snell.oracles import (CrrSpec, brute_force_tree_value, coupled_skeleton_from_fine_path, crr_american,
                           crr_european, crr_reference, exit_mgf, fbm_cholesky, fbm_covariance, fbm_exact,
                           euler_uniform_grid, fine_brownian_path, legendre_i_star, put_payoff)


def test_zero_width_tree_returns_discounted_payoff():
    spec = CrrSpec(up=1.0, down=1.0, prob=0.5, discount=1.0, steps=5, payoff=lambda s: np.full(s.shape, 0.5))
    assert crr_american(spec, 1.0) == 0.5
    assert crr_european(spec, 1.0) == 0.5


def test_american_dominates_european():
    spec = crr_reference(40.0, 0.06, 0.2, 1.0, 200)
    american = crr_american(spec, 36.0)
    european = crr_european(spec, 36.0)
    assert american >= european
    # well-known benchmark for this contract
    assert american == pytest.approx(4.487, abs=2e-2)


@pytest.mark.parametrize("steps", [1, 2, 3, 4])
def test_enumeration_matches_backward_recursion(steps):
    spec = crr_reference(40.0, 0.06, 0.2, 0.5, steps)
    assert brute_force_tree_value(spec, 38.0) == pytest.approx(crr_american(spec, 38.0), abs=1e-12)


def test_enumeration_step_limit():
    with pytest.raises(DomainError):
        brute_force_tree_value(crr_reference(40.0, 0.06, 0.2, 1.0, 5), 36.0)


def test_crr_spec_rejects_bad_trees():
    with pytest.raises(DomainError):
        CrrSpec(up=0.9, down=1.1, prob=0.5, discount=1.0, steps=2, payoff=put_payoff(1.0))
    with pytest.raises(DomainError):
        CrrSpec(up=1.1, down=0.9, prob=1.0, discount=1.0, steps=2, payoff=put_payoff(1.0))


def test_fbm_covariance_reduces_to_brownian_minimum():
    t = np.array([0.2, 0.5, 1.0])
    assert np.allclose(fbm_covariance(0.5, t), np.minimum(t[:, None], t[None, :]))
    assert fbm_covariance(0.7, np.array([1.0]))[0, 0] == 1.0


def test_cholesky_factor_reproduces_covariance():
    t = np.linspace(1.0 / 256, 1.0, 256)
    factor = fbm_cholesky(0.6, t)
    assert np.max(np.abs(factor @ factor.T - fbm_covariance(0.6, t))) <= 1e-10


def test_exact_fbm_sample_statistics():
    path = fbm_exact(0.75, [0.0, 0.5, 1.0], np.random.default_rng(0), n_paths=20_000)
    assert np.all(path.values[:, 0] == 0.0)
    var = path.values[:, 2].var()
    assert abs(var - 1.0) < 0.05, f"Var B_H(1) = {var}"
    with pytest.raises(DomainError):
        fbm_exact(0.75, [0.5, 0.2], np.random.default_rng(0))


def test_exit_mgf_values():
    assert exit_mgf(0.0) == 1.0
    assert exit_mgf(-1.0) == pytest.approx(0.4591, abs=1e-4)
    with pytest.raises(DomainError):
        exit_mgf(0.5)


def test_legendre_transform_matches_grid_search():
    lam = -np.linspace(1e-4, 60.0, 600_001)
    log_mgf = -np.log(np.cosh(np.sqrt(-2.0 * lam)))
    for x in (0.2, 0.5, 0.8):
        brute = float(np.max(lam * x - log_mgf))
        assert legendre_i_star(x) == pytest.approx(brute, abs=1e-6), f"x={x}"
    assert legendre_i_star(0.5) == pytest.approx(0.327, abs=2e-3)


def test_legendre_transform_decreases_towards_mean():
    values = [legendre_i_star(x) for x in (0.1, 0.3, 0.5, 0.7, 0.9, 0.99)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-3
    with pytest.raises(DomainError):
        legendre_i_star(1.0)


def test_coupled_skeleton_on_a_ramp():
    dt = 0.01
    fine = np.arange(101) * dt
    s = coupled_skeleton_from_fine_path(fine, dt, 0.245, steps=3)
    # moves of 0.245 complete at grid indices 25, 50, 75
    assert np.allclose(s.times, [0.25, 0.5, 0.75])
    assert np.all(s.signs[:, 0] == 1)
    with pytest.raises(CouplingError):
        coupled_skeleton_from_fine_path(fine, dt, 0.245, steps=5)


def test_coupled_skeleton_increments_have_exit_mean():
    rng = np.random.default_rng(12)
    eps, dt = 0.125, 1e-5
    deltas = []
    for _ in range(60):
        fine = fine_brownian_path(rng, dt, 2.0)
        deltas.append(coupled_skeleton_from_fine_path(fine, dt, eps).deltas)
    mean = float(np.concatenate(deltas).mean())
    # discrete monitoring overshoots the exit time slightly
    assert abs(mean / eps ** 2 - 1.0) < 0.06, f"mean increment {mean}"


def test_uniform_grid_euler_without_noise_is_compound_growth():
    x = euler_uniform_grid(lambda t, v: v, lambda t, v: np.zeros_like(v), 2.0, 1.0, 1e-3, 3,
                           np.random.default_rng(0))
    assert np.allclose(x, 2.0 * (1.0 + 1e-3) ** 1000, rtol=1e-12)


def test_uniform_grid_euler_brownian_moments():
    x = euler_uniform_grid(lambda t, v: np.zeros_like(v), lambda t, v: np.ones_like(v), 0.0, 1.0, 0.01,
                           20_000, np.random.default_rng(4))
    assert abs(x.mean()) < 0.03
    assert abs(x.var() - 1.0) < 0.05, f"Var W(1) = {x.var()}"
    with pytest.raises(DomainError):
        euler_uniform_grid(lambda t, v: v, lambda t, v: v, 0.0, 1.0, 0.0, 1, np.random.default_rng(0))

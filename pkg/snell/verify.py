"""
Property battery run by `snell_cli.py verify`.

Each check prints one ✓/✗ line; the suite passes when every check passes.
The quick battery covers the exit-time law, the exact tree against the
binomial pricers, step planning and the fBm driver; --full adds the
stochastic pipeline against CRR, the error sequence across levels and the
coupling study.
"""

import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Sequence

import numpy as np

from .errors import SnellError
from .experiment import (ExperimentConfig, ReferenceSpec, fbm_coupling_study, fbm_terminal_variance, make_phi,
                         plan_steps, run_experiment, simulate_block)
from .fbm_kernel import FbmParams, calibrate_norm_const, kernel_values
from .oracles import (CrrSpec, brute_force_tree_value, crr_american, crr_reference, exit_mgf, fbm_cholesky,
                      fbm_covariance, kernel_closed_form, nualart_norm_const, put_payoff)
from .rng import FRESH_TAG, TRAIN_TAG, path_stream
from .skeleton import sample_unit_exit_times
from .state_models import make_coefficients, make_payoff
from .stop_dp import BasisSpec, backward_induction, exact_tree_dp, lower_bound_estimate, tree_bundle

logger = logging.getLogger(__name__)

# American put used by the binomial cross-checks
PUT_X0 = 36.0
PUT_STRIKE = 40.0
PUT_RATE = 0.06
PUT_SIGMA = 0.2

TREE_TOL = 1e-12
PIPELINE_RTOL = 0.015
VARIANCE_RTOL = 0.05


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class VerifySummary:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def checks_passed(self) -> int:
        return sum(r.passed for r in self.results)


def tree_put_setup(eps: float, stages: int):
    """Euler coefficients, payoff, horizon and the CRR tree they reproduce exactly."""
    spec = make_coefficients("linear_drift", (PUT_RATE,), "linear", (PUT_SIGMA,))
    payoff = make_payoff("put", (PUT_STRIKE, PUT_RATE))
    dt = eps * eps
    crr = CrrSpec(up=1.0 + PUT_RATE * dt + PUT_SIGMA * eps, down=1.0 + PUT_RATE * dt - PUT_SIGMA * eps,
                  prob=0.5, discount=math.exp(-PUT_RATE * dt), steps=stages, payoff=put_payoff(PUT_STRIKE))
    # past the last stage so no reward is frozen by rounding in the grid times
    horizon = 2.0 * stages * dt
    return spec, payoff, horizon, crr


def check_exit_law(seed: int, n_draws: int = 10 ** 6) -> CheckResult:
    tau = sample_unit_exit_times(path_stream(seed, 0, (FRESH_TAG,)), n_draws)
    mean = float(tau.mean())
    ok = abs(mean - 1.0) <= 0.01
    details = [f"mean={mean:.4f}"]
    for lam in (-0.5, -1.0, -2.0):
        w = np.exp(lam * tau)
        se = float(w.std(ddof=1) / math.sqrt(n_draws))
        gap = abs(float(w.mean()) - exit_mgf(lam))
        ok &= gap <= 3.0 * se
        details.append(f"mgf({lam})={gap / se:.2f}se")
    return CheckResult("exit-time law", ok, ", ".join(details))


def check_variational_residuals(eps: float = 0.25, stage_range: Sequence[int] = range(2, 13)) -> CheckResult:
    spec = make_coefficients("linear_drift", (PUT_RATE,), "linear", (PUT_SIGMA,))
    payoffs = {
        "put": make_payoff("put", (PUT_STRIKE, PUT_RATE)),
        "lookback_max": make_payoff("lookback_max"),
        "constant": make_payoff("constant", (1.0,)),
    }
    worst = 0.0
    terminal_ok = True
    for stages in stage_range:
        for payoff in payoffs.values():
            res = exact_tree_dp(eps, stages, spec, payoff, 2.0 * stages * eps * eps, PUT_X0)
            worst = max(worst, max(float(np.abs(r).max()) for r in res.residuals))
            leaves = tree_bundle(eps, stages, spec, payoff, 2.0 * stages * eps * eps, PUT_X0).rewards
            terminal_ok &= bool(np.array_equal(res.node_values[stages], leaves[:, stages]))
    ok = worst <= TREE_TOL and terminal_ok
    return CheckResult("variational residuals", ok, f"max |residual|={worst:.3g} over {len(stage_range)}x3 trees")


def check_tree_vs_crr(eps: float = 0.25, max_stages: int = 12) -> CheckResult:
    worst = 0.0
    for stages in range(1, max_stages + 1):
        spec, payoff, horizon, crr = tree_put_setup(eps, stages)
        tree = exact_tree_dp(eps, stages, spec, payoff, horizon, PUT_X0).value
        ref = crr_american(crr, PUT_X0)
        worst = max(worst, abs(tree - ref) / max(1.0, abs(ref)))
    return CheckResult("tree vs CRR", worst <= TREE_TOL, f"max rel diff={worst:.3g}")


def check_brute_force(eps: float = 0.25) -> CheckResult:
    worst = 0.0
    for stages in range(1, 5):
        crr = tree_put_setup(eps, stages)[3]
        worst = max(worst, abs(brute_force_tree_value(crr, PUT_X0) - crr_american(crr, PUT_X0)))
    return CheckResult("brute force vs CRR", worst <= TREE_TOL, f"max diff={worst:.3g}")


def check_plan_steps() -> CheckResult:
    phi = make_phi("pow2")
    first = plan_steps(phi, 0.40, 0.15, hurst=0.6)
    second = plan_steps(phi, 0.20, 0.15, hurst=0.6)
    ok = first == (1.88, 14) and second[1] == 99
    return CheckResult("plan_steps", ok, f"e1=0.4 -> {first}, e1=0.2 -> {second}")


def check_kernel_calibration(hursts: Sequence[float] = (0.6, 0.75)) -> CheckResult:
    worst_const = 0.0
    worst_kernel = 0.0
    for h in hursts:
        d = calibrate_norm_const(FbmParams(h))
        d_ref = nualart_norm_const(h)
        worst_const = max(worst_const, abs(d / d_ref - 1.0))
        s = np.array([1e-3, 0.1, 0.5, 0.9])
        ours = kernel_values(FbmParams(h, norm_const=d_ref), 1.0, s)
        ref = kernel_closed_form(h, 1.0, s)
        worst_kernel = max(worst_kernel, float(np.max(np.abs(ours / ref - 1.0))))
    ok = worst_const <= 1e-6 and worst_kernel <= 1e-7
    return CheckResult("kernel calibration", ok,
                       f"d_H rel err={worst_const:.2g}, kernel rel err={worst_kernel:.2g}")


def check_fbm_variance(seed: int, hursts: Sequence[float] = (0.6, 0.75), eps: float = 0.0625,
                       n_paths: int = 10 ** 4, norm_scale: float = 1.0, threads: int = 1) -> CheckResult:
    details = []
    ok = True
    for h in hursts:
        var = fbm_terminal_variance(h, eps, n_paths, seed, norm_scale=norm_scale, threads=threads)
        ok &= abs(var - 1.0) <= VARIANCE_RTOL
        details.append(f"H={h}: var={var:.4f}")
    return CheckResult("fBm driver variance", ok, ", ".join(details))


def check_cholesky(hurst: float = 0.6) -> CheckResult:
    grid = np.linspace(1.0 / 256, 1.0, 256)
    factor = fbm_cholesky(hurst, grid)
    err = float(np.max(np.abs(factor @ factor.T - fbm_covariance(hurst, grid))))
    return CheckResult("fBm Cholesky", err <= 1e-10, f"max |LL^T - C|={err:.3g}")


def pipeline_config(seed: int, n_paths: int, threads: int = 1) -> ExperimentConfig:
    """Markovian put with eps = 1/4, i.e. 16 stages on [0, 1], cubic basis in the current features."""
    return ExperimentConfig(
        model="bm_sde", payoff="put", payoff_params=(PUT_STRIKE, PUT_RATE),
        drift="linear_drift", drift_params=(PUT_RATE,), vol="linear", vol_params=(PUT_SIGMA,),
        phi=make_phi("pow2"), k_list=(2,), horizon=1.0, x0=PUT_X0,
        train_paths=n_paths, fresh_paths=n_paths, basis=BasisSpec("polynomial", 3, 0),
        seed=seed, output_dir=Path("reports"), threads=threads,
        reference=ReferenceSpec("crr", "put", PUT_STRIKE, PUT_RATE, PUT_SIGMA, 2000),
    )


def check_pipeline(seed: int, n_paths: int = 10 ** 5, threads: int = 1) -> CheckResult:
    cfg = pipeline_config(seed, n_paths, threads)
    ref = crr_american(crr_reference(PUT_STRIKE, PUT_RATE, PUT_SIGMA, 1.0, 2000), PUT_X0)
    train = simulate_block(cfg, 2, n_paths, TRAIN_TAG)
    result = backward_induction(train, cfg.basis)
    lower, se = lower_bound_estimate(simulate_block(cfg, 2, n_paths, FRESH_TAG), result.models)
    rel = abs(result.value - ref) / ref
    ok = rel <= PIPELINE_RTOL and lower <= ref + 3.0 * se
    return CheckResult("pipeline vs CRR", ok,
                       f"V0={result.value:.4f}, lower={lower:.4f}±{se:.2g}, CRR={ref:.4f}, rel={rel:.3%}")


def fbm_sequence_config(seed: int, n_paths: int, output_dir: Path, threads: int = 1) -> ExperimentConfig:
    """fBm-driven bounded drift under a capped put, levels k = 1, 2, 3, self-referenced."""
    return ExperimentConfig(
        model="fbm_drift", payoff="capped_put", payoff_params=(0.2, 1.0),
        drift="bounded", drift_params=(-1.0, 1.0), vol="zero", vol_params=(),
        phi=make_phi("pow2"), k_list=(1, 2, 3), horizon=1.0, x0=0.0,
        train_paths=n_paths, fresh_paths=n_paths, basis=BasisSpec("polynomial", 2, 2),
        seed=seed, output_dir=output_dir, hurst=0.6, threads=threads,
        reference=ReferenceSpec("self"),
    )


def check_level_sequence(seed: int, n_paths: int = 5 * 10 ** 4, fbm_paths: int = 2000,
                         threads: int = 1) -> CheckResult:
    """
    Markovian put over k = 1, 2, 3: |V0 - CRR| must not grow by more than 2 SE
    from one level to the next. fBm model over the same levels: consecutive
    differences of V0 must shrink in the same sense.
    """
    with tempfile.TemporaryDirectory() as tmp:
        markov_cfg = replace(pipeline_config(seed, n_paths, threads), k_list=(1, 2, 3),
                             output_dir=Path(tmp) / "markov")
        markov = run_experiment(markov_cfg)
        fbm = run_experiment(fbm_sequence_config(seed, fbm_paths, Path(tmp) / "fbm", threads))
    errors = ", ".join(f"{r.abs_error:.4f}" for r in markov.rows)
    diffs = ", ".join(f"{r.consecutive_diff:.4f}" for r in fbm.rows[1:])
    ok = markov.error_decreasing is True and fbm.differences_shrinking is True
    return CheckResult("level sequence", ok, f"CRR errors=[{errors}], fBm consecutive diffs=[{diffs}] (self-ref)")


def check_coupling(seed: int, n_paths: int = 100, threads: int = 1) -> CheckResult:
    study = fbm_coupling_study(0.6, (0.25, 0.125, 0.0625), n_paths, seed, threads=threads)
    ok = study.strictly_decreasing and study.slope is not None and study.slope >= 0.5
    errs = ", ".join(f"{e:.4f}" for e in study.mean_sup_error)
    return CheckResult("fBm coupling", ok, f"errors=[{errs}], slope={study.slope}")


def _timed(name: str, fn: Callable[[], CheckResult]) -> CheckResult:
    started = time.perf_counter()
    try:
        result = fn()
    except SnellError as e:
        logger.error(f"Check '{name}' raised: {e}")
        result = CheckResult(name, False, f"raised {type(e).__name__}: {e}")
    return CheckResult(result.name, result.passed, result.detail, time.perf_counter() - started)


def verify_suite(seed: int = 20240607, full: bool = False, threads: int = 1,
                 norm_scale: float = 1.0) -> VerifySummary:
    """Run the battery and print one line per check."""
    checks = [
        ("exit-time law", lambda: check_exit_law(seed)),
        ("variational residuals", check_variational_residuals),
        ("tree vs CRR", check_tree_vs_crr),
        ("brute force vs CRR", check_brute_force),
        ("plan_steps", check_plan_steps),
        ("kernel calibration", check_kernel_calibration),
        ("fBm Cholesky", check_cholesky),
        ("fBm driver variance",
         lambda: check_fbm_variance(seed, norm_scale=norm_scale, threads=threads)),
    ]
    if full:
        checks += [
            ("pipeline vs CRR", lambda: check_pipeline(seed, threads=threads)),
            ("level sequence", lambda: check_level_sequence(seed, threads=threads)),
            ("fBm coupling", lambda: check_coupling(seed, threads=threads)),
        ]

    print("Snell envelope approximation - Verification")
    print("=" * 60)
    summary = VerifySummary()
    for name, fn in checks:
        result = _timed(name, fn)
        summary.results.append(result)
        mark = "✓" if result.passed else "✗"
        print(f"{mark} {result.name}: {result.detail} ({result.seconds:.1f}s)")

    print("\n" + "=" * 60)
    print(f"Verification Results: {summary.checks_passed}/{len(summary.results)} checks passed")
    if summary.passed:
        print("✓ All checks passed")
    else:
        print("✗ Some checks failed")
    return summary

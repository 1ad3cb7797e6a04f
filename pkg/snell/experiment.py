"""
Convergence studies across skeleton levels eps_k = phi(k).

For every level the runner simulates a training block and an independent
fresh block of skeleton paths, runs the regression dynamic programme on the
training block, evaluates the fitted stopping rule on the fresh block and
writes one CSV row. The report compares the values against a reference:
a CRR price for Markovian models, or the finest level itself (labelled
"self-ref") when no exact price exists.
"""

import csv
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from .errors import ConfigError, DomainError, ExperimentError, SnellError
from .fbm_kernel import FbmParams, driver_value_at, drivers_for_batch, with_calibration
from .oracles import (coupled_skeleton_from_fine_path, crr_american, crr_reference,
                      fbm_reference_on_fine_path, fine_brownian_path, legendre_i_star)
from .rng import FINE_PATH_TAG, FRESH_TAG, TRAIN_TAG, map_path_chunks, path_stream
from .skeleton import SkeletonConfig, build_skeleton, grid_query, num_steps, simulate_skeletons
from .state_models import drifted_fbm_path, euler_path, make_coefficients, make_payoff, reward_path
from .stop_dp import BasisSpec, PathBundle, backward_induction, export_models, lower_bound_estimate, make_bundle

logger = logging.getLogger(__name__)

CSV_HEADER = ["k", "eps", "steps", "value", "lower", "lower_se", "reference", "abs_error",
              "reference_kind", "e2_bound", "rate_term", "consecutive_diff"]

SUMMARY_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["value", "se", "slope", "wall_time_seconds"],
    "properties": {
        "value": {"type": "number"},
        "se": {"type": "number", "minimum": 0},
        "slope": {"type": ["number", "null"]},
        "wall_time_seconds": {"type": "number", "minimum": 0},
        "reference_kind": {"enum": ["crr", "self-ref", "none"]},
        "reference": {"type": ["number", "null"]},
        "consecutive_differences": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "error_decreasing": {"type": ["boolean", "null"]},
        "differences_shrinking": {"type": ["boolean", "null"]},
    },
}


# ---------------------------------------------------------------------------
# Level map phi and its inverse
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Phi:
    """eps_k = phi(k); `inverse` returns the (possibly fractional) level of a given eps."""

    kind: str = "pow2"
    eps_list: Tuple[float, ...] = ()

    def __call__(self, k: float) -> float:
        if self.kind == "pow2":
            return 2.0 ** (-k)
        idx = int(k)
        if idx != k or not 1 <= idx <= len(self.eps_list):
            raise DomainError(f"custom phi has no level {k}")
        return self.eps_list[idx - 1]

    def inverse(self, eps: float) -> float:
        if not eps > 0:
            raise DomainError(f"phi inverse needs eps > 0, got {eps}")
        if self.kind == "pow2":
            return -math.log2(eps)
        for k, value in enumerate(self.eps_list, start=1):
            if value <= eps:
                return float(k)
        raise DomainError(f"no level of the custom phi reaches eps <= {eps}")


def make_phi(kind: str = "pow2", eps_list: Sequence[float] = ()) -> Phi:
    if kind not in ("pow2", "custom"):
        raise DomainError(f"unknown phi '{kind}'")
    values = tuple(float(e) for e in eps_list)
    if kind == "custom":
        if not values or not all(e > 0 for e in values):
            raise DomainError(f"custom phi needs positive eps values, got {list(values)}")
        if any(b >= a for a, b in zip(values, values[1:])):
            raise DomainError(f"custom phi eps values must be strictly decreasing, got {list(values)}")
    return Phi(kind, values)


def plan_steps(phi: Phi, e1: float, lam: float, horizon: float = 1.0,
               hurst: Optional[float] = None, decimals: int = 2) -> Tuple[float, int]:
    """
    Smallest level whose rate term eps**(1-2 lam) reaches the target e1, and
    the stage count it needs. k* is truncated to `decimals` places.
    """
    if not 0 < e1 < 1:
        raise DomainError(f"target error must lie in (0, 1), got {e1}")
    low = hurst - 0.5 if hurst is not None else 0.0
    if not (low < lam < 0.5 if hurst is not None else 0.0 <= lam < 0.5):
        raise DomainError(f"lambda={lam} outside the admissible window ({low}, 0.5)")
    raw = phi.inverse(e1 ** (1.0 / (1.0 - 2.0 * lam)))
    scale = 10 ** decimals
    k_star = math.floor(raw * scale + 1e-9) / scale
    if phi.kind == "custom":
        k_star = float(math.ceil(raw))
    return k_star, num_steps(phi(k_star), horizon, 1)


def e2_bound(n_paths: int, steps: int) -> float:
    """log(N) N^(-2/(2+e-1)), the Monte Carlo part of the error budget."""
    return math.log(n_paths) * n_paths ** (-2.0 / (2.0 + steps - 1.0))


def loglog_slope(eps: Sequence[float], errors: Sequence[float]) -> Optional[float]:
    """Least-squares slope of log(error) against log(eps) over positive errors."""
    pairs = [(e, err) for e, err in zip(eps, errors) if err is not None and err > 0 and e > 0]
    if len(pairs) < 2:
        return None
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])


def decreasing_within_se(values: Sequence[float], ses: Sequence[float], width: float = 2.0) -> Optional[bool]:
    """True when each value is at most the previous one plus `width` combined standard errors."""
    if len(values) < 2:
        return None
    return all(
        b <= a + width * math.hypot(sa, sb)
        for a, b, sa, sb in zip(values, values[1:], ses, ses[1:])
    )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceSpec:
    kind: str = "none"
    payoff: str = "put"
    strike: float = 0.0
    rate: float = 0.0
    sigma: float = 1.0
    steps: int = 2000


@dataclass(frozen=True)
class ReportParams:
    lam: float = 0.15
    beta: float = 0.5
    zeta: float = 1.0
    delta: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    payoff: str
    payoff_params: Tuple[float, ...]
    drift: str
    drift_params: Tuple[float, ...]
    vol: str
    vol_params: Tuple[float, ...]
    phi: Phi
    k_list: Tuple[int, ...]
    horizon: float
    x0: float
    train_paths: int
    fresh_paths: int
    basis: BasisSpec
    seed: int
    output_dir: Path
    hurst: Optional[float] = None
    quad_order: int = 32
    dim: int = 1
    itm_only: bool = False
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    report: ReportParams = field(default_factory=ReportParams)
    threads: int = 1
    name: str = "experiment"

    def __post_init__(self):
        if not self.k_list:
            raise ConfigError("k_list must not be empty")
        if self.train_paths < 2 or self.fresh_paths < 2:
            raise ConfigError("train_paths and fresh_paths must both be >= 2")
        if self.model not in ("bm_sde", "fbm_drift"):
            raise ConfigError(f"unknown model '{self.model}'")
        if self.model == "fbm_drift" and self.hurst is None:
            raise ConfigError("fbm_drift needs a hurst index")
        if self.reference.kind == "crr" and self.model != "bm_sde":
            raise ConfigError("a CRR reference only applies to the bm_sde model")

    @classmethod
    def from_dict(cls, cfg: Dict[str, Any]) -> "ExperimentConfig":
        exp = cfg["experiment"]
        model = cfg["model"]
        basis = cfg.get("basis", {})
        ref = cfg.get("reference", {})
        rep = cfg.get("report", {})
        fbm = cfg.get("fbm", {})
        runtime = cfg.get("runtime", {})
        clip = basis.get("clip_bound")
        try:
            return cls(
                name=exp.get("name", "experiment"),
                model=exp["model"],
                payoff=cfg["payoff"]["name"],
                payoff_params=tuple(cfg["payoff"].get("params", [])),
                drift=model["drift"],
                drift_params=tuple(model.get("drift_params", [])),
                vol=model.get("vol", "constant"),
                vol_params=tuple(model.get("vol_params", [1.0])),
                phi=make_phi(exp.get("phi", "pow2"), exp.get("eps_list", [])),
                k_list=tuple(int(k) for k in exp["k_list"]),
                horizon=float(exp["horizon"]),
                x0=float(exp.get("x0", 0.0)),
                train_paths=int(exp["train_paths"]),
                fresh_paths=int(exp["fresh_paths"]),
                basis=BasisSpec(
                    family=basis.get("family", "polynomial"),
                    degree=int(basis.get("degree", 2)),
                    window=int(basis.get("window", 1)),
                    clip_bound=math.inf if clip is None else float(clip),
                ),
                itm_only=bool(basis.get("itm_only", False)),
                seed=int(exp["seed"]),
                output_dir=Path(runtime.get("output_dir", "reports")),
                hurst=float(fbm["hurst"]) if exp["model"] == "fbm_drift" else None,
                quad_order=int(fbm.get("quad_order", 32)),
                dim=int(cfg.get("skeleton", {}).get("dim", 1)),
                reference=ReferenceSpec(
                    kind=ref.get("kind", "none"),
                    payoff=ref.get("payoff", "put"),
                    strike=float(ref.get("strike", 0.0)),
                    rate=float(ref.get("rate", 0.0)),
                    sigma=float(ref.get("sigma", 1.0)),
                    steps=int(ref.get("steps", 2000)),
                ),
                report=ReportParams(
                    lam=float(rep.get("lambda", 0.15)),
                    beta=float(rep.get("beta", 0.5)),
                    zeta=float(rep.get("zeta", 1.0)),
                    delta=float(rep.get("delta", 0.1)),
                ),
                threads=int(runtime.get("threads", 1)),
            )
        except DomainError as e:
            raise ConfigError(str(e)) from e
        except KeyError as e:
            raise ConfigError(f"missing configuration key {e}") from e


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _fmt(x: Optional[float]) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".12g")


@dataclass(frozen=True)
class RateRow:
    k: int
    eps: float
    steps: int
    value: float
    lower: float
    lower_se: float
    e2_bound: float
    rate_term: float
    reference: Optional[float] = None
    abs_error: Optional[float] = None
    reference_kind: str = "none"
    consecutive_diff: Optional[float] = None

    def csv_fields(self) -> List[str]:
        return [_fmt(self.k), _fmt(self.eps), _fmt(self.steps), _fmt(self.value), _fmt(self.lower),
                _fmt(self.lower_se), _fmt(self.reference), _fmt(self.abs_error), self.reference_kind,
                _fmt(self.e2_bound), _fmt(self.rate_term), _fmt(self.consecutive_diff)]


@dataclass(frozen=True)
class RateReport:
    rows: List[RateRow]
    slope: Optional[float]
    reference_kind: str
    reference_value: Optional[float]
    wall_time_seconds: float = 0.0
    error_decreasing: Optional[bool] = None
    differences_shrinking: Optional[bool] = None


def write_csv(path: Path, rows: Sequence[RateRow]) -> Path:
    """Write report rows with the fixed header."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.csv_fields())
    return path


def rate_term(cfg: ExperimentConfig, eps: float) -> float:
    """Shape of the theoretical error bound at this eps (constants omitted)."""
    rep = cfg.report
    if cfg.model == "fbm_drift":
        return eps ** (1.0 - 2.0 * rep.lam)
    large_dev = math.exp(-legendre_i_star(1.0 - rep.delta) / (rep.zeta * eps * eps))
    return eps ** (2.0 * rep.beta) + large_dev + rep.delta * math.log(2.0 / rep.delta)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

@contextmanager
def _stage(tag: str):
    try:
        yield
    except ExperimentError:
        raise
    except SnellError as e:
        logger.error(f"Experiment failed at {tag}: {e}")
        raise ExperimentError(str(e), tag) from e


def simulate_block(cfg: ExperimentConfig, k: int, n_paths: int, stream_tag: int,
                   params: Optional[FbmParams] = None) -> PathBundle:
    """Skeletons, states, rewards and features for one block of paths at level k."""
    eps = cfg.phi(k)
    steps = num_steps(eps, cfg.horizon, cfg.dim)
    tag = f"k={k} block={'train' if stream_tag == TRAIN_TAG else 'fresh'}"
    coeffs = make_coefficients(cfg.drift, cfg.drift_params, cfg.vol, cfg.vol_params)
    payoff = make_payoff(cfg.payoff, cfg.payoff_params)

    with _stage(f"{tag} stage=skeleton"):
        batch = simulate_skeletons(SkeletonConfig(eps, cfg.dim, cfg.horizon, cfg.seed), steps, n_paths,
                                   tags=(k, stream_tag), threads=cfg.threads)
    if cfg.model == "fbm_drift":
        with _stage(f"{tag} stage=driver"):
            drivers = drivers_for_batch(params, batch, steps, threads=cfg.threads)
        with _stage(f"{tag} stage=state"):
            states = drifted_fbm_path(coeffs, drivers, batch, cfg.x0, steps)
    else:
        with _stage(f"{tag} stage=state"):
            states = euler_path(coeffs, batch, cfg.x0, steps)
    with _stage(f"{tag} stage=reward"):
        rewards = reward_path(payoff, states, batch, cfg.horizon, steps)
    return make_bundle(batch, states, rewards, cfg.basis.window)


def _reference_value(cfg: ExperimentConfig) -> Optional[float]:
    if cfg.reference.kind != "crr":
        return None
    ref = cfg.reference
    spec = crr_reference(ref.strike, ref.rate, ref.sigma, cfg.horizon, ref.steps, kind=ref.payoff)
    value = crr_american(spec, cfg.x0)
    logger.info(f"CRR reference ({ref.steps} steps): {value:.10g}")
    return value


def run_level(cfg: ExperimentConfig, k: int, out_dir: Path, params: Optional[FbmParams] = None,
              reference: Optional[float] = None) -> RateRow:
    eps = cfg.phi(k)
    steps = num_steps(eps, cfg.horizon, cfg.dim)
    train = simulate_block(cfg, k, cfg.train_paths, TRAIN_TAG, params)
    with _stage(f"k={k} stage=regression"):
        result = backward_induction(train, cfg.basis, steps, itm_only=cfg.itm_only)
    fresh = simulate_block(cfg, k, cfg.fresh_paths, FRESH_TAG, params)
    with _stage(f"k={k} stage=lower_bound"):
        lower, lower_se = lower_bound_estimate(fresh, result.models)
    with _stage(f"k={k} stage=export"):
        export_models(result.models, out_dir / f"models_k{k}.json", k=k, eps=eps, dim=cfg.dim)

    if lower > result.value + 3.0 * lower_se:
        logger.warning(f"k={k}: lower bound {lower:.6g} exceeds V0 {result.value:.6g} by more than 3 SE")
    kind = "crr" if reference is not None else "none"
    return RateRow(
        k=k, eps=eps, steps=steps, value=result.value, lower=lower, lower_se=lower_se,
        e2_bound=e2_bound(cfg.train_paths, steps), rate_term=rate_term(cfg, eps),
        reference=reference, abs_error=None if reference is None else abs(result.value - reference),
        reference_kind=kind,
    )


def _with_self_reference(rows: List[RateRow]) -> List[RateRow]:
    finest = rows[-1].value
    logger.warning("No exact price for this model; finest level used as self-reference (self-ref)")
    return [replace(r, reference=finest, abs_error=abs(r.value - finest), reference_kind="self-ref") for r in rows]


def run_experiment(cfg: ExperimentConfig) -> RateReport:
    """Run every level of cfg.k_list and write report.csv, models_k<k>.json and summary.json."""
    started = time.perf_counter()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    levels = sorted(cfg.k_list, key=lambda k: -cfg.phi(k))

    params = None
    if cfg.model == "fbm_drift":
        with _stage("calibration"):
            params = with_calibration(FbmParams(cfg.hurst, cfg.quad_order))
    with _stage("reference"):
        reference = _reference_value(cfg)

    csv_path = out_dir / "report.csv"
    rows: List[RateRow] = []
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for k in levels:
            row = run_level(cfg, k, out_dir, params, reference)
            if rows:
                row = replace(row, consecutive_diff=abs(row.value - rows[-1].value))
            rows.append(row)
            writer.writerow(row.csv_fields())
            f.flush()
            print(f"[run] k={k} eps={row.eps:.6g} steps={row.steps} V0={row.value:.6g} "
                  f"lower={row.lower:.6g}±{row.lower_se:.2g}")

    kind = "crr" if reference is not None else "none"
    if cfg.reference.kind == "self" and len(rows) > 1:
        rows = _with_self_reference(rows)
        kind = "self-ref"
        reference = rows[-1].value
    write_csv(csv_path, rows)

    slope = loglog_slope([r.eps for r in rows], [r.abs_error for r in rows])
    ses = [r.lower_se for r in rows]
    diffs = [r.consecutive_diff for r in rows[1:]]
    error_decreasing = decreasing_within_se([r.abs_error for r in rows], ses) if kind == "crr" else None
    differences_shrinking = decreasing_within_se(diffs, ses[1:]) if len(diffs) > 1 else None
    wall = time.perf_counter() - started
    summary = {
        "name": cfg.name,
        "model": cfg.model,
        "value": rows[-1].value,
        "se": rows[-1].lower_se,
        "lower": rows[-1].lower,
        "slope": slope,
        "reference_kind": kind,
        "reference": reference,
        "consecutive_differences": diffs,
        "error_decreasing": error_decreasing,
        "differences_shrinking": differences_shrinking,
        "k_list": [r.k for r in rows],
        "train_paths": cfg.train_paths,
        "fresh_paths": cfg.fresh_paths,
        "lambda": cfg.report.lam,
        "wall_time_seconds": wall,
    }
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    logger.info(f"Experiment '{cfg.name}' finished in {wall:.1f}s; slope={slope}")
    return RateReport(rows=rows, slope=slope, reference_kind=kind, reference_value=reference,
                      wall_time_seconds=wall, error_decreasing=error_decreasing,
                      differences_shrinking=differences_shrinking)


# ---------------------------------------------------------------------------
# fBm driver studies
# ---------------------------------------------------------------------------

def fbm_terminal_variance(hurst: float, eps: float, n_paths: int, seed: int, quad_order: int = 32,
                          norm_scale: float = 1.0, threads: int = 1) -> float:
    """
    Sample variance of the driver at the last grid time <= 1. norm_scale
    multiplies the calibrated constant (a value other than 1 must fail the check).
    """
    params = with_calibration(FbmParams(hurst, quad_order))
    params = FbmParams(hurst, quad_order, params.norm_const * norm_scale)
    cfg = SkeletonConfig(eps, 1, 1.0, seed)
    steps = 2 * num_steps(eps, 1.0, 1)

    def one_chunk(start: int, stop: int) -> np.ndarray:
        out = np.empty(stop - start)
        for row, i in enumerate(range(start, stop)):
            sk = build_skeleton(cfg, steps, path_stream(seed, i, (FRESH_TAG,)))
            m, _ = grid_query(sk, 1.0)
            out[row] = driver_value_at(params, sk, m)
        return out

    values = np.concatenate(map_path_chunks(one_chunk, n_paths, threads))
    return float(values.var(ddof=1))


@dataclass(frozen=True)
class CouplingStudy:
    eps: Tuple[float, ...]
    mean_sup_error: Tuple[float, ...]
    se: Tuple[float, ...]
    slope: Optional[float]

    @property
    def strictly_decreasing(self) -> bool:
        return all(a > b for a, b in zip(self.mean_sup_error, self.mean_sup_error[1:]))


def fbm_coupling_study(hurst: float, eps_list: Sequence[float], n_paths: int, seed: int,
                       dt: float = 1e-5, n_checks: int = 16, quad_order: int = 32,
                       threads: int = 1) -> CouplingStudy:
    """
    E sup_t |B^eps_H(last grid time <= t) - B_H(t)| over check times in (0, 1],
    with the skeletons and the reference B_H read off the same fine Brownian path.
    """
    params = with_calibration(FbmParams(hurst, quad_order))
    checks = np.arange(1, n_checks + 1) / n_checks
    eps_list = sorted(eps_list, reverse=True)

    def one_chunk(start: int, stop: int) -> np.ndarray:
        errors = np.empty((stop - start, len(eps_list)))
        for row, i in enumerate(range(start, stop)):
            fine = fine_brownian_path(path_stream(seed, i, (FINE_PATH_TAG,)), dt, 1.0)
            ref = fbm_reference_on_fine_path(hurst, fine, dt, checks, params.norm_const)
            for col, eps in enumerate(eps_list):
                sk = coupled_skeleton_from_fine_path(fine, dt, eps)
                approx = np.array([driver_value_at(params, sk, grid_query(sk, t)[0]) for t in checks])
                errors[row, col] = np.max(np.abs(approx - ref))
        return errors

    errors = np.concatenate(map_path_chunks(one_chunk, n_paths, threads))
    means = errors.mean(axis=0)
    ses = errors.std(axis=0, ddof=1) / math.sqrt(n_paths) if n_paths > 1 else np.zeros(len(eps_list))
    return CouplingStudy(eps=tuple(eps_list), mean_sup_error=tuple(float(m) for m in means),
                         se=tuple(float(s) for s in ses), slope=loglog_slope(eps_list, means))

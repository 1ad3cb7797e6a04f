"""
Volterra kernel of fractional Brownian motion (1/2 < H < 1) and the fBm
driver built on a skeleton.

    K_H(t, s) = d_H s^(1/2-H) * int_s^t u^(H-1/2) (u-s)^(H-3/2) du

The inner integral is evaluated on panels graded geometrically away from s:
the first panel [s, 2s] carries the (u-s)^(H-3/2) singularity as a
Gauss-Jacobi weight, the remaining panels [s 2^i, s 2^(i+1)] are smooth and
use Gauss-Legendre. d_H is calibrated so that Var B_H(1) = 1.
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import CalibrationError, DomainError, NumericError
from .rng import map_path_chunks
from .skeleton import Skeleton, SkeletonBatch

logger = logging.getLogger(__name__)

DEFAULT_QUAD_ORDER = 32
# Dyadic levels between the outer and innermost panel of the variance integral.
GRADING_LEVELS = 40
CALIBRATION_RTOL = 1e-8


@dataclass(frozen=True)
class FbmParams:
    """Hurst index, quadrature order and kernel normalising constant d_H."""

    hurst: float
    quad_order: int = DEFAULT_QUAD_ORDER
    norm_const: float = 1.0

    def __post_init__(self):
        if not 0.5 <= self.hurst < 1.0:
            raise DomainError(f"hurst must lie in [0.5, 1), got {self.hurst}")
        if self.quad_order < 4:
            raise DomainError(f"quad_order must be >= 4, got {self.quad_order}")
        if not self.norm_const > 0:
            raise DomainError(f"norm_const must be positive, got {self.norm_const}")

    @property
    def is_brownian(self) -> bool:
        return self.hurst == 0.5


@dataclass(frozen=True, eq=False)
class FbmDriver:
    """fBm approximation at the skeleton grid times T_0=0..T_upto."""

    params: FbmParams
    grid_values: np.ndarray
    skeleton_ref: str = ""


@lru_cache(maxsize=64)
def _jacobi_rule(order: int, alpha: float, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    x, w = roots_jacobi(order, alpha, beta)
    return x, w


@lru_cache(maxsize=16)
def _legendre_rule(order: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = roots_legendre(order)
    return x, w


def _inner_integral(h: float, t: float, s: np.ndarray, order: int) -> np.ndarray:
    """int_s^t u^(h-1/2) (u-s)^(h-3/2) du for every entry of s (0 < s < t)."""
    a = h - 0.5
    b = h - 1.5

    right0 = np.minimum(2.0 * s, t)
    half0 = 0.5 * (right0 - s)
    xj, wj = _jacobi_rule(order, 0.0, b)
    u0 = s[:, None] + half0[:, None] * (1.0 + xj)[None, :]
    total = half0 ** (b + 1.0) * ((u0 ** a) @ wj)

    n_panels = np.maximum(1, np.ceil(np.log2(t / s))).astype(np.int64)
    counts = n_panels - 1
    if counts.sum():
        owner = np.repeat(np.arange(s.size), counts)
        offsets = np.cumsum(counts) - counts
        level = np.arange(owner.size) - np.repeat(offsets, counts) + 1
        left = s[owner] * np.exp2(level)
        right = np.minimum(2.0 * left, t)
        half = 0.5 * (right - left)
        mid = 0.5 * (right + left)
        xl, wl = _legendre_rule(order)
        u = mid[:, None] + half[:, None] * xl[None, :]
        vals = ((u ** a) * (u - s[owner][:, None]) ** b) @ wl * half
        total = total + np.bincount(owner, weights=vals, minlength=s.size)
    return total


def kernel_values(p: FbmParams, t: float, s) -> np.ndarray:
    """Vectorised K_H(t, s) over an array of s in (0, t]."""
    if p.is_brownian:
        raise DomainError("the Volterra kernel is only defined for 1/2 < H < 1")
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if np.any(s <= 0) or np.any(s > t):
        raise DomainError(f"kernel needs 0 < s <= t, got t={t}, s range [{s.min()}, {s.max()}]")
    out = np.zeros_like(s)
    inner = s < t
    if np.any(inner):
        sv = s[inner]
        out[inner] = p.norm_const * sv ** (0.5 - p.hurst) * _inner_integral(p.hurst, t, sv, p.quad_order)
    return out


def kernel_K(p: FbmParams, t: float, s: float) -> float:
    """K_H(t, s) for 0 < s <= t; zero on the diagonal."""
    return float(kernel_values(p, t, np.array([s]))[0])


def _variance_integral(p: FbmParams, t: float, order: int) -> float:
    h = p.hurst
    p = replace(p, quad_order=order)

    # [t/2, t]: K^2 behaves like (t-s)^(2h-1) at the right end
    xt, wt = _jacobi_rule(order, 2.0 * h - 1.0, 0.0)
    s_top = 0.75 * t + 0.25 * t * xt

    # [t 2^-(i+1), t 2^-i], i = 1..L-1: smooth
    xl, wl = _legendre_rule(order)
    level = np.arange(1, GRADING_LEVELS)
    left = t * np.exp2(-(level + 1.0))
    half = 0.5 * left
    s_mid = (left + half)[:, None] + half[:, None] * xl[None, :]

    # [0, t 2^-L]: K^2 behaves like s^(1-2h) at the left end
    delta = t * 2.0 ** -GRADING_LEVELS
    xi, wi = _jacobi_rule(order, 0.0, 1.0 - 2.0 * h)
    s_in = 0.5 * delta * (1.0 + xi)

    k2 = kernel_values(p, t, np.concatenate([s_top, s_mid.ravel(), s_in])) ** 2
    k_top = k2[:order]
    k_mid = k2[order:order + s_mid.size].reshape(s_mid.shape)
    k_in = k2[order + s_mid.size:]

    top = (0.25 * t) ** (2.0 * h) * np.dot(wt, k_top / (t - s_top) ** (2.0 * h - 1.0))
    mid = np.sum((k_mid @ wl) * half)
    inner = (0.5 * delta) ** (2.0 - 2.0 * h) * np.dot(wi, k_in / s_in ** (1.0 - 2.0 * h))
    return float(top + mid + inner)


def kernel_variance(p: FbmParams, t: float) -> float:
    """int_0^t K_H(t, s)^2 ds, the variance of the represented B_H(t)."""
    if t <= 0:
        raise DomainError(f"kernel_variance needs t > 0, got {t}")
    if p.is_brownian:
        return float(t)
    return _variance_integral(p, t, p.quad_order)


def calibrate_norm_const(p: FbmParams) -> float:
    """d_H such that int_0^1 K_H(1, s)^2 ds = 1."""
    if p.is_brownian:
        return 1.0
    unit = replace(p, norm_const=1.0)
    coarse = _variance_integral(unit, 1.0, p.quad_order)
    fine = _variance_integral(unit, 1.0, int(math.ceil(1.5 * p.quad_order)))
    if not (math.isfinite(coarse) and math.isfinite(fine)) or coarse <= 0 or fine <= 0:
        raise CalibrationError(f"kernel variance integral is not positive and finite for H={p.hurst}")
    if abs(coarse - fine) > CALIBRATION_RTOL * fine:
        raise CalibrationError(
            f"kernel variance integral not converged for H={p.hurst}: {coarse} vs {fine}"
        )
    d_h = 1.0 / math.sqrt(fine)
    logger.debug(f"Calibrated d_H={d_h:.12g} for H={p.hurst}, quad_order={p.quad_order}")
    return d_h


def with_calibration(p: FbmParams) -> FbmParams:
    """Copy of p carrying the calibrated normalising constant."""
    return replace(p, norm_const=calibrate_norm_const(p))


def _check_driver_input(s: Skeleton, upto: int):
    if s.dim != 1:
        raise DomainError(f"fBm driver needs a one-dimensional skeleton, got dim={s.dim}")
    if not 0 <= upto <= s.steps:
        raise DomainError(f"upto={upto} outside 0..{s.steps}")


def _telescoped(p: FbmParams, s: Skeleton, m: int) -> float:
    # sum_{n=1}^{m-1} A(T_n) [K(T_m, T_{n+1}) - K(T_m, T_n)]; A = 0 on [0, T_1)
    if m < 2:
        return 0.0
    row = kernel_values(p, s.times[m - 1], s.times[:m])
    return float(np.dot(s.walks[0, 1:m], np.diff(row)))


def driver_value_at(p: FbmParams, s: Skeleton, m: int) -> float:
    """Driver value at the single grid time T_m."""
    _check_driver_input(s, m)
    if p.is_brownian:
        return float(s.walks[0, m])
    value = _telescoped(p, s, m)
    if not math.isfinite(value):
        raise NumericError(f"non-finite fBm driver value at stage {m}", stage=m)
    return value


def driver_from_skeleton(p: FbmParams, s: Skeleton, upto: int) -> FbmDriver:
    """fBm approximation at T_0..T_upto by telescoping kernel differences."""
    _check_driver_input(s, upto)
    if p.is_brownian:
        return FbmDriver(params=p, grid_values=s.walks[0, :upto + 1].copy(), skeleton_ref=s.ident)
    values = np.zeros(upto + 1)
    for m in range(2, upto + 1):
        values[m] = _telescoped(p, s, m)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise NumericError(f"non-finite fBm driver value at stage {bad}", stage=bad)
    return FbmDriver(params=p, grid_values=values, skeleton_ref=s.ident)


def drivers_for_batch(p: FbmParams, batch: SkeletonBatch, upto: Optional[int] = None,
                      threads: int = 1) -> np.ndarray:
    """(N, upto + 1) driver values for every skeleton of a batch."""
    upto = batch.steps if upto is None else upto

    def one_chunk(start: int, stop: int) -> np.ndarray:
        return np.stack([
            driver_from_skeleton(p, batch.skeleton(i), upto).grid_values for i in range(start, stop)
        ])

    return np.concatenate(map_path_chunks(one_chunk, batch.n_paths, threads))

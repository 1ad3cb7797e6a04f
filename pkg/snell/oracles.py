"""
Independent reference computations.

Nothing here reuses the code paths it is meant to check: the binomial
pricers never touch the skeleton or the regression, the exact fBm sampler
works from the covariance function, and the closed-form kernel uses the
hypergeometric representation instead of quadrature.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import beta as beta_fn
from scipy.special import hyp2f1

from .errors import CouplingError, DomainError, NumericError
from .skeleton import Skeleton, skeleton_from_events

logger = logging.getLogger(__name__)

MAX_CHOLESKY_POINTS = 2 ** 12
CHOLESKY_JITTER = 1e-12
MAX_BRUTE_FORCE_STEPS = 4


# ---------------------------------------------------------------------------
# Binomial (Cox-Ross-Rubinstein) pricers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrrSpec:
    """Recombining binomial tree; payoff maps spot values to exercise values."""

    up: float
    down: float
    prob: float
    discount: float
    steps: int
    payoff: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if not 0 < self.prob < 1:
            raise DomainError(f"prob must lie in (0, 1), got {self.prob}")
        if self.down > self.up:
            raise DomainError(f"need down <= up, got down={self.down}, up={self.up}")
        if self.steps < 0:
            raise DomainError(f"steps must be non-negative, got {self.steps}")

    def spots(self, s0: float, level: int) -> np.ndarray:
        j = np.arange(level + 1)
        return s0 * self.up ** j * self.down ** (level - j)


def _crr(spec: CrrSpec, s0: float, american: bool) -> float:
    v = spec.payoff(spec.spots(s0, spec.steps))
    for level in range(spec.steps - 1, -1, -1):
        cont = spec.discount * (spec.prob * v[1:] + (1.0 - spec.prob) * v[:-1])
        v = np.maximum(spec.payoff(spec.spots(s0, level)), cont) if american else cont
    return float(v[0])


def crr_american(spec: CrrSpec, s0: float) -> float:
    """American value: exercise compared with discounted continuation at every node."""
    return _crr(spec, s0, american=True)


def crr_european(spec: CrrSpec, s0: float) -> float:
    return _crr(spec, s0, american=False)


def put_payoff(strike: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: np.maximum(strike - s, 0.0)


def call_payoff(strike: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: np.maximum(s - strike, 0.0)


def crr_reference(strike: float, rate: float, sigma: float, horizon: float, steps: int,
                  kind: str = "put") -> CrrSpec:
    """Standard CRR parametrisation u = exp(sigma sqrt(dt)), d = 1/u, risk-neutral p."""
    if sigma <= 0 or horizon <= 0 or steps < 1:
        raise DomainError("crr_reference needs sigma > 0, horizon > 0 and steps >= 1")
    dt = horizon / steps
    up = math.exp(sigma * math.sqrt(dt))
    down = 1.0 / up
    prob = (math.exp(rate * dt) - down) / (up - down)
    payoff = {"put": put_payoff, "call": call_payoff}[kind](strike)
    return CrrSpec(up=up, down=down, prob=prob, discount=math.exp(-rate * dt), steps=steps, payoff=payoff)


def brute_force_tree_value(spec: CrrSpec, s0: float) -> float:
    """
    Best expected discounted payoff over every stopping rule on the
    non-recombining tree, by exhaustive enumeration (at most 4 steps).
    """
    n = spec.steps
    if n > MAX_BRUTE_FORCE_STEPS:
        raise DomainError(f"brute-force enumeration supports at most {MAX_BRUTE_FORCE_STEPS} steps")
    leaves = 2 ** n
    # ups[l, k] = 1 when leaf l moved up at step k+1
    ups = np.array(list(itertools.product([0, 1], repeat=n)), dtype=np.int64).reshape(leaves, n)
    n_up = np.concatenate([np.zeros((leaves, 1), dtype=np.int64), np.cumsum(ups, axis=1)], axis=1)
    level = np.arange(n + 1)[None, :]
    spots = s0 * spec.up ** n_up * spec.down ** (level - n_up)
    gains = spec.discount ** level * spec.payoff(spots)
    probs = np.prod(np.where(ups == 1, spec.prob, 1.0 - spec.prob), axis=1)

    # node id of the stage-k prefix of each leaf (stage 0 is the root)
    node_ids = np.zeros((leaves, n), dtype=np.int64)
    for k in range(1, n):
        prefix = (np.arange(leaves) >> (n - k))
        node_ids[:, k] = (2 ** k - 1) + prefix
    n_nodes = 2 ** n - 1

    best = -math.inf
    for bits in itertools.product([False, True], repeat=n_nodes):
        stop = np.array(bits, dtype=bool)[node_ids] if n else np.zeros((leaves, 0), dtype=bool)
        stop = np.concatenate([stop, np.ones((leaves, 1), dtype=bool)], axis=1)
        tau = np.argmax(stop, axis=1)
        best = max(best, float(np.dot(probs, gains[np.arange(leaves), tau])))
    return best


# ---------------------------------------------------------------------------
# Exact fractional Brownian motion
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FbmExactPath:
    times: np.ndarray
    values: np.ndarray  # (n_paths, len(times))


def fbm_covariance(hurst: float, times: np.ndarray) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    h2 = 2.0 * hurst
    return 0.5 * (t[:, None] ** h2 + t[None, :] ** h2 - np.abs(t[:, None] - t[None, :]) ** h2)


def fbm_cholesky(hurst: float, times: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of the fBm covariance, retried once with diagonal jitter."""
    cov = fbm_covariance(hurst, times)
    try:
        return scipy.linalg.cholesky(cov, lower=True)
    except np.linalg.LinAlgError:
        jitter = CHOLESKY_JITTER * float(np.mean(np.diag(cov)))
        logger.warning(f"fBm covariance not positive definite; retrying with jitter {jitter:.3g}")
        try:
            return scipy.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]), lower=True)
        except np.linalg.LinAlgError as e:
            raise NumericError("fBm covariance Cholesky failed after jitter") from e


def fbm_exact(hurst: float, grid: Sequence[float], rng: np.random.Generator, n_paths: int = 1) -> FbmExactPath:
    """Exact fBm samples on an increasing grid; a leading 0 maps to value 0."""
    if not 0 < hurst < 1:
        raise DomainError(f"hurst must lie in (0, 1), got {hurst}")
    times = np.asarray(grid, dtype=float)
    if times.ndim != 1 or times.size == 0 or np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise DomainError("grid must be a non-empty, strictly increasing sequence of times >= 0")
    if times.size > MAX_CHOLESKY_POINTS:
        raise DomainError(f"Cholesky sampler supports at most {MAX_CHOLESKY_POINTS} grid points")
    positive = times[times > 0]
    values = np.zeros((n_paths, times.size))
    if positive.size:
        factor = fbm_cholesky(hurst, positive)
        values[:, times.size - positive.size:] = rng.standard_normal((n_paths, positive.size)) @ factor.T
    return FbmExactPath(times=times, values=values)


def nualart_norm_const(hurst: float) -> float:
    """Closed-form d_H for which Var B_H(1) = 1."""
    return math.sqrt(hurst * (2.0 * hurst - 1.0) / beta_fn(2.0 - 2.0 * hurst, hurst - 0.5))


def kernel_closed_form(hurst: float, t: float, s, norm_const: Optional[float] = None) -> np.ndarray:
    """
    K_H(t, s) via the Gauss hypergeometric function:
    d_H/(H-1/2) (t-s)^(H-1/2) (s/t)^(1/2-H) 2F1(1/2-H, 1; H+1/2; 1-s/t).
    """
    d = nualart_norm_const(hurst) if norm_const is None else norm_const
    s = np.asarray(s, dtype=float)
    a = 0.5 - hurst
    c = hurst + 0.5
    return d / (hurst - 0.5) * (t - s) ** (hurst - 0.5) * (s / t) ** a * hyp2f1(a, 1.0, c, 1.0 - s / t)


# ---------------------------------------------------------------------------
# Exit-time law
# ---------------------------------------------------------------------------

def exit_mgf(lam: float) -> float:
    """E[exp(lam * tau)] = sech(sqrt(2|lam|)) for the unit exit time, lam <= 0."""
    if lam > 0:
        raise DomainError(f"exit_mgf is only provided for lam <= 0, got {lam}")
    return 1.0 / math.cosh(math.sqrt(2.0 * abs(lam)))


def _log_cosh(y: float) -> float:
    return float(np.logaddexp(y, -y) - math.log(2.0))


def legendre_i_star(x: float) -> float:
    """
    I*(x) = sup_{lam < 0} [lam x - log E exp(lam tau)] for 0 < x < 1.

    With y = sqrt(-2 lam) the objective is log cosh(y) - x y^2 / 2; golden
    section locates the maximiser, Newton on tanh(y) = x y polishes it.
    """
    if not 0 < x < 1:
        raise DomainError(f"legendre_i_star supports 0 < x < 1, got {x}")

    def objective(y: float) -> float:
        return x * y * y / 2.0 - _log_cosh(y)

    y0 = min(1.0 / x, math.sqrt(3.0 * (1.0 - x)))
    res = scipy.optimize.minimize_scalar(objective, bracket=(0.5 * y0, y0), method="golden")
    y = abs(float(res.x))
    try:
        y = float(scipy.optimize.newton(
            lambda v: math.tanh(v) - x * v, y,
            fprime=lambda v: 1.0 / math.cosh(v) ** 2 - x, tol=1e-14, maxiter=50,
        ))
    except RuntimeError:
        logger.debug(f"Newton polish for I*({x}) did not converge; keeping golden-section result")
    return max(0.0, -objective(abs(y)))


# ---------------------------------------------------------------------------
# Coupling with a fine Brownian path
# ---------------------------------------------------------------------------

def fine_brownian_path(rng: np.random.Generator, dt: float, horizon: float) -> np.ndarray:
    """Brownian values on the grid 0, dt, 2dt, ..., starting at 0."""
    n = int(math.ceil(horizon / dt))
    path = np.zeros(n + 1)
    path[1:] = np.cumsum(rng.standard_normal(n)) * math.sqrt(dt)
    return path


def coupled_skeleton_from_fine_path(fine: np.ndarray, dt: float, eps: float,
                                    steps: Optional[int] = None, ident: str = "") -> Skeleton:
    """
    Skeleton read off a sampled Brownian path: each event is the first grid
    point where the path has moved at least eps from its value at the
    previous event. With steps=None every event on the path is returned.
    """
    if eps <= 0 or dt <= 0:
        raise DomainError("eps and dt must be positive")
    w = np.asarray(fine, dtype=float)
    event_times = []
    event_signs = []
    pos = 0
    first_chunk = max(64, int(4.0 * eps * eps / dt))
    while steps is None or len(event_times) < steps:
        anchor = w[pos]
        start, chunk, found = pos + 1, first_chunk, None
        while start < w.size:
            hits = np.flatnonzero(np.abs(w[start:start + chunk] - anchor) >= eps)
            if hits.size:
                found = start + int(hits[0])
                break
            start += chunk
            chunk *= 2
        if found is None:
            if steps is None:
                break
            raise CouplingError(
                f"fine path exhausted after {len(event_times)} of {steps} requested events"
            )
        event_times.append(found * dt)
        event_signs.append(1 if w[found] > anchor else -1)
        pos = found
    times = np.asarray(event_times, dtype=float)
    deltas = np.diff(times, prepend=0.0)
    return skeleton_from_events(eps, 1, deltas, np.zeros(times.size, dtype=np.int64),
                                np.asarray(event_signs, dtype=np.int8), ident)


def fbm_reference_on_fine_path(hurst: float, fine: np.ndarray, dt: float, check_times: Sequence[float],
                               norm_const: Optional[float] = None) -> np.ndarray:
    """
    int_0^t dK_H(t, s) B(s) for the piecewise-constant fine path, evaluated at
    each check time with the closed-form kernel.
    """
    w = np.asarray(fine, dtype=float)
    grid = np.arange(w.size) * dt
    out = np.empty(len(check_times))
    for i, t in enumerate(check_times):
        count = int(np.searchsorted(grid, t, side="right"))
        if count < 2:
            out[i] = 0.0
            continue
        s = grid[1:count]
        k = kernel_closed_form(hurst, t, s, norm_const)
        # K(t, t) = 0 closes the last interval
        k_next = np.append(k[1:], 0.0)
        out[i] = float(np.dot(w[1:count], k_next - k))
    return out


# ---------------------------------------------------------------------------
# Uniform-grid Euler
# ---------------------------------------------------------------------------

def euler_uniform_grid(drift: Callable[[float, np.ndarray], np.ndarray],
                       vol: Callable[[float, np.ndarray], np.ndarray], x0: float, horizon: float,
                       dt: float, n_paths: int, rng: np.random.Generator) -> np.ndarray:
    """
    Terminal values of X_{t+dt} = X_t + drift(t, X_t) dt + vol(t, X_t) dW on the
    grid 0, dt, ..., horizon, driven by Gaussian increments. drift and vol see
    the current value only.
    """
    if not (dt > 0 and horizon > 0):
        raise DomainError(f"dt and horizon must be positive, got dt={dt}, horizon={horizon}")
    if n_paths < 1:
        raise DomainError(f"n_paths must be >= 1, got {n_paths}")
    n = int(math.ceil(horizon / dt - 1e-9))
    h = horizon / n
    root = math.sqrt(h)
    x = np.full(n_paths, float(x0))
    for i in range(n):
        t = i * h
        x = x + drift(t, x) * h + vol(t, x) * root * rng.standard_normal(n_paths)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite value on the uniform Euler grid at step {i + 1}", stage=i + 1)
    logger.debug(f"Uniform-grid Euler: {n} steps of {h:.3g} on {n_paths} paths")
    return x

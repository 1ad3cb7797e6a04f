"""
State processes and rewards on the random skeleton grid.

Coefficients and payoffs are non-anticipative functionals f(t, path) where
`path` is a PathView holding only the grid values up to the current stage.
All functionals are evaluated for a whole batch of paths at once: `t` is an
(N,) array and the view holds (N, n+1) arrays.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, NumericError
from .fbm_kernel import FbmDriver
from .skeleton import Skeleton, SkeletonBatch, as_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PathView:
    """Grid times and values of N paths up to (and including) the current stage."""

    times: np.ndarray   # (N, n+1)
    values: np.ndarray  # (N, n+1)

    @property
    def stage(self) -> int:
        return self.values.shape[1] - 1

    def current(self) -> np.ndarray:
        return self.values[:, -1]

    def now(self) -> np.ndarray:
        return self.times[:, -1]

    def at(self, u) -> np.ndarray:
        """Value at time u (piecewise constant between grid times)."""
        u = np.broadcast_to(np.asarray(u, dtype=float), (self.values.shape[0],))
        idx = np.clip((self.times <= u[:, None]).sum(axis=1) - 1, 0, None)
        return self.values[np.arange(self.values.shape[0]), idx]

    def running_max(self) -> np.ndarray:
        return self.values.max(axis=1)

    def running_min(self) -> np.ndarray:
        return self.values.min(axis=1)

    def time_average(self) -> np.ndarray:
        """(1/t) int_0^t path(u) du for the piecewise-constant path."""
        if self.stage == 0:
            return self.current().copy()
        widths = np.diff(self.times, axis=1)
        area = (self.values[:, :-1] * widths).sum(axis=1)
        t = self.now()
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(t > 0, area / t, self.current())


Functional = Callable[[np.ndarray, PathView], np.ndarray]


@dataclass(frozen=True)
class NamedFunctional:
    """Registry entry bound to its parameters."""

    name: str
    params: tuple
    fn: Functional = field(repr=False, compare=False)

    def __call__(self, t: np.ndarray, path: PathView) -> np.ndarray:
        return np.broadcast_to(self.fn(t, path), t.shape).astype(float)


@dataclass(frozen=True)
class CoefficientSpec:
    """
    Drift and volatility functionals of the state equation.

    theta is the Hoelder exponent in time the coefficients are assumed to
    satisfy; the scheme never reads it.
    """

    drift: Functional
    vol: Functional
    lipschitz_bound: Optional[float] = None
    theta: float = 1.0


@dataclass(frozen=True, eq=False)
class StatePath:
    """Euler values of N paths at the grid times T_0..T_steps."""

    x0: float
    values: np.ndarray  # (N, steps+1)
    times: np.ndarray   # (N, steps+1)
    skeleton_ref: str = ""

    @property
    def n_paths(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class RewardPath:
    """Rewards per stage; frozen_from[i] is the first stage past the horizon, -1 if none."""

    values: np.ndarray       # (N, steps+1)
    frozen_from: np.ndarray  # (N,)

    def frozen_index(self, i: int = 0) -> Optional[int]:
        f = int(self.frozen_from[i])
        return None if f < 0 else f


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def _discount(rate: float, t: np.ndarray) -> np.ndarray:
    return np.exp(-rate * t)


PAYOFFS: Dict[str, Callable[..., Functional]] = {
    "put": lambda strike, rate=0.0: (
        lambda t, w: _discount(rate, t) * np.maximum(strike - w.current(), 0.0)),
    "call": lambda strike, rate=0.0: (
        lambda t, w: _discount(rate, t) * np.maximum(w.current() - strike, 0.0)),
    "capped_put": lambda strike, cap: (
        lambda t, w: np.minimum(np.maximum(strike - w.current(), 0.0), cap)),
    "lookback_max": lambda: (lambda t, w: w.running_max()),
    "lookback_put": lambda rate=0.0: (
        lambda t, w: _discount(rate, t) * (w.running_max() - w.current())),
    "identity": lambda: (lambda t, w: w.current()),
    "constant": lambda c: (lambda t, w: np.full(t.shape, float(c))),
}

DRIFTS: Dict[str, Callable[..., Functional]] = {
    "zero": lambda: (lambda t, w: np.zeros(t.shape)),
    "constant": lambda c: (lambda t, w: np.full(t.shape, float(c))),
    "linear_drift": lambda a=1.0: (lambda t, w: a * w.current()),
    "bounded": lambda lo, hi: (lambda t, w: np.clip(w.current(), lo, hi)),
    "path_mean": lambda a=1.0: (lambda t, w: a * w.time_average()),
}

VOLS: Dict[str, Callable[..., Functional]] = {
    "zero": lambda: (lambda t, w: np.zeros(t.shape)),
    "constant": lambda s: (lambda t, w: np.full(t.shape, float(s))),
    "linear": lambda s: (lambda t, w: s * w.current()),
}


def _lookup(table: Dict[str, Callable[..., Functional]], kind: str, name: str,
            params: Sequence[float]) -> NamedFunctional:
    if name not in table:
        raise DomainError(f"unknown {kind} '{name}'; known: {sorted(table)}")
    try:
        fn = table[name](*params)
    except TypeError as e:
        raise DomainError(f"bad parameters {list(params)} for {kind} '{name}'") from e
    return NamedFunctional(name=name, params=tuple(params), fn=fn)


def make_payoff(name: str, params: Sequence[float] = ()) -> NamedFunctional:
    return _lookup(PAYOFFS, "payoff", name, params)


def make_drift(name: str, params: Sequence[float] = ()) -> NamedFunctional:
    return _lookup(DRIFTS, "drift", name, params)


def make_vol(name: str, params: Sequence[float] = ()) -> NamedFunctional:
    return _lookup(VOLS, "vol", name, params)


def make_coefficients(drift: str, drift_params: Sequence[float] = (),
                      vol: str = "constant", vol_params: Sequence[float] = (1.0,),
                      lipschitz_bound: Optional[float] = None) -> CoefficientSpec:
    return CoefficientSpec(
        drift=make_drift(drift, drift_params),
        vol=make_vol(vol, vol_params),
        lipschitz_bound=lipschitz_bound,
    )


# ---------------------------------------------------------------------------
# Schemes
# ---------------------------------------------------------------------------

def _check_steps(batch: SkeletonBatch, steps: int):
    if not 0 <= steps <= batch.steps:
        raise DomainError(f"steps={steps} outside 0..{batch.steps}")


def _step_check(x: np.ndarray, n: int):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite state value at stage {n}", stage=n)


def euler_path(spec: CoefficientSpec, s: Union[Skeleton, SkeletonBatch], x0: float,
               steps: int, coord: int = 0) -> StatePath:
    """X_n = X_{n-1} + drift(T_{n-1}, X) dT_n + vol(T_{n-1}, X) dA_n."""
    batch = as_batch(s)
    _check_steps(batch, steps)
    n_paths = batch.n_paths
    times = batch.grid_times()[:, :steps + 1]
    d_walk = batch.walk_increments(coord)
    x = np.empty((n_paths, steps + 1))
    x[:, 0] = x0
    for n in range(1, steps + 1):
        view = PathView(times[:, :n], x[:, :n])
        t = times[:, n - 1]
        a = np.broadcast_to(spec.drift(t, view), (n_paths,))
        sig = np.broadcast_to(spec.vol(t, view), (n_paths,))
        x[:, n] = x[:, n - 1] + a * batch.deltas[:, n - 1] + sig * d_walk[:, n - 1]
        _step_check(x[:, n], n)
    ref = batch.idents[0] if n_paths == 1 and batch.idents else ""
    return StatePath(x0=float(x0), values=x, times=times, skeleton_ref=ref)


def drifted_fbm_path(spec: CoefficientSpec, drv: Union[FbmDriver, np.ndarray],
                     s: Union[Skeleton, SkeletonBatch], x0: float, steps: int) -> StatePath:
    """X_n = X_{n-1} + drift(T_{n-1}, X) dT_n + (B_H(T_n) - B_H(T_{n-1}))."""
    batch = as_batch(s)
    _check_steps(batch, steps)
    grid = drv.grid_values if isinstance(drv, FbmDriver) else np.asarray(drv)
    grid = np.atleast_2d(grid)
    if grid.shape[0] != batch.n_paths or grid.shape[1] < steps + 1:
        raise DomainError(
            f"driver shape {grid.shape} does not cover {batch.n_paths} paths x {steps + 1} stages"
        )
    n_paths = batch.n_paths
    times = batch.grid_times()[:, :steps + 1]
    d_drive = np.diff(grid[:, :steps + 1], axis=1)
    x = np.empty((n_paths, steps + 1))
    x[:, 0] = x0
    for n in range(1, steps + 1):
        view = PathView(times[:, :n], x[:, :n])
        a = np.broadcast_to(spec.drift(times[:, n - 1], view), (n_paths,))
        x[:, n] = x[:, n - 1] + a * batch.deltas[:, n - 1] + d_drive[:, n - 1]
        _step_check(x[:, n], n)
    ref = drv.skeleton_ref if isinstance(drv, FbmDriver) else ""
    return StatePath(x0=float(x0), values=x, times=times, skeleton_ref=ref)


def reward_path(F: Functional, X: StatePath, s: Union[Skeleton, SkeletonBatch, None],
                T: float, steps: int) -> RewardPath:
    """
    Z_n = F(t_n, X up to n) while t_n <= T; afterwards Z stays at the value of
    the last stage inside the horizon. The grid times come from the skeleton
    when one is given, otherwise from X.
    """
    if T < 0:
        raise DomainError(f"horizon must be non-negative, got {T}")
    if steps > X.values.shape[1] - 1:
        raise DomainError(f"steps={steps} exceeds the state path length")
    if s is None:
        times = X.times[:, :steps + 1]
    else:
        batch = as_batch(s)
        if batch.n_paths != X.n_paths or batch.steps < steps:
            raise DomainError(
                f"skeleton batch ({batch.n_paths} paths, {batch.steps} steps) does not match "
                f"the state path ({X.n_paths} paths, {steps} steps)"
            )
        times = batch.grid_times()[:, :steps + 1]
    z = np.empty((X.n_paths, steps + 1))
    for n in range(steps + 1):
        z[:, n] = F(times[:, n], PathView(times[:, :n + 1], X.values[:, :n + 1]))
    if not np.all(np.isfinite(z)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(z), axis=0))[0])
        raise NumericError(f"non-finite reward at stage {bad}", stage=bad)

    last_inside = (times <= T).sum(axis=1) - 1
    idx = np.minimum(np.arange(steps + 1)[None, :], last_inside[:, None])
    z = np.take_along_axis(z, idx, axis=1)
    frozen_from = np.where(last_inside < steps, last_inside + 1, -1)
    n_frozen = int((frozen_from >= 0).sum())
    if n_frozen:
        logger.debug(f"{n_frozen} of {X.n_paths} reward paths frozen at horizon T={T}")
    return RewardPath(values=z, frozen_from=frozen_from)

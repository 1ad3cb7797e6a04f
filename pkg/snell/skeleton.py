"""
Brownian skeleton built from exit times of the interval (-eps, eps).

Each coordinate of a d-dimensional Brownian motion is replaced by a renewal
sequence of exit times; between two exits the walk A holds its value and at
each exit it jumps by +eps or -eps. The exit time of a standard Brownian
motion from (-1, 1) is sampled by numerically inverting its distribution
function, and scaled by eps**2.
"""

import heapq
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erfc

from .errors import DomainError, SamplerError
from .rng import map_path_chunks, path_stream

logger = logging.getLogger(__name__)

# Below this time the image (erfc) series converges fastest, above it the
# spectral (exp) series does.
SMALL_TIME_SWITCH = 0.64
SERIES_TOL = 1e-12
MAX_SERIES_TERMS = 60
NEWTON_TOL = 1e-10
MAX_NEWTON_ITER = 40
BISECTION_STEPS = 8
# P(tau > 50) is below 1e-26, far under double resolution of a uniform draw.
T_MAX = 50.0

RECORD_DTYPE = np.dtype([("delta", "<f8"), ("coord", "u1"), ("sign", "i1")])


# ---------------------------------------------------------------------------
# Exit-time law of standard Brownian motion from (-1, 1)
# ---------------------------------------------------------------------------

def _small_time_cdf(t: np.ndarray) -> np.ndarray:
    x = 1.0 / np.sqrt(2.0 * t)
    total = np.zeros_like(t)
    for n in range(MAX_SERIES_TERMS):
        term = 2.0 * erfc((2 * n + 1) * x)
        total += term if n % 2 == 0 else -term
        if np.max(term, initial=0.0) < SERIES_TOL:
            break
    return total


def _large_time_survival(t: np.ndarray) -> np.ndarray:
    c = math.pi ** 2 / 8.0
    total = np.zeros_like(t)
    for n in range(MAX_SERIES_TERMS):
        m = 2 * n + 1
        term = (4.0 / math.pi) / m * np.exp(-m * m * c * t)
        total += term if n % 2 == 0 else -term
        if np.max(term, initial=0.0) < SERIES_TOL:
            break
    return total


def _small_time_density(t: np.ndarray) -> np.ndarray:
    pref = 2.0 / np.sqrt(2.0 * math.pi * t ** 3)
    total = np.zeros_like(t)
    for n in range(MAX_SERIES_TERMS):
        m = 2 * n + 1
        term = pref * m * np.exp(-m * m / (2.0 * t))
        total += term if n % 2 == 0 else -term
        if np.max(term, initial=0.0) < SERIES_TOL:
            break
    return total


def _large_time_density(t: np.ndarray) -> np.ndarray:
    c = math.pi ** 2 / 8.0
    total = np.zeros_like(t)
    for n in range(MAX_SERIES_TERMS):
        m = 2 * n + 1
        term = (math.pi / 2.0) * m * np.exp(-m * m * c * t)
        total += term if n % 2 == 0 else -term
        if np.max(term, initial=0.0) < SERIES_TOL:
            break
    return total


def exit_time_cdf(t) -> np.ndarray:
    """P(tau <= t) for the exit time of standard Brownian motion from (-1, 1)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    small = (t > 0) & (t <= SMALL_TIME_SWITCH)
    large = t > SMALL_TIME_SWITCH
    if np.any(small):
        out[small] = _small_time_cdf(t[small])
    if np.any(large):
        out[large] = 1.0 - _large_time_survival(t[large])
    return np.clip(out, 0.0, 1.0)


def exit_time_density(t) -> np.ndarray:
    """Density of the unit exit time."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    small = (t > 0) & (t <= SMALL_TIME_SWITCH)
    large = t > SMALL_TIME_SWITCH
    if np.any(small):
        out[small] = _small_time_density(t[small])
    if np.any(large):
        out[large] = _large_time_density(t[large])
    return out


@lru_cache(maxsize=1)
def _bracket_table() -> Tuple[np.ndarray, np.ndarray]:
    grid = np.concatenate([
        [0.0],
        np.geomspace(0.005, SMALL_TIME_SWITCH, 400),
        np.linspace(SMALL_TIME_SWITCH, T_MAX, 1600)[1:],
    ])
    values = exit_time_cdf(grid)
    return grid, np.maximum.accumulate(values)


def invert_exit_cdf(u: np.ndarray) -> np.ndarray:
    """Solve P(tau <= t) = u elementwise by bracketed bisection and Newton polish."""
    u = np.asarray(u, dtype=float)
    flat = u.ravel()
    grid, table = _bracket_table()
    idx = np.clip(np.searchsorted(table, flat, side="left"), 1, grid.size - 1)
    lo = grid[idx - 1].copy()
    hi = grid[idx].copy()

    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        below = exit_time_cdf(mid) < flat
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)

    t = 0.5 * (lo + hi)
    active = np.arange(flat.size)
    for _ in range(MAX_NEWTON_ITER):
        if active.size == 0:
            break
        ta = t[active]
        f = exit_time_cdf(ta) - flat[active]
        lo_a = np.where(f < 0, ta, lo[active])
        hi_a = np.where(f > 0, ta, hi[active])
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = ta - f / exit_time_density(ta)
        outside = ~np.isfinite(tn) | (tn <= lo_a) | (tn >= hi_a)
        tn = np.where(outside, 0.5 * (lo_a + hi_a), tn)
        done = (np.abs(tn - ta) <= NEWTON_TOL) | (f == 0)
        t[active] = np.where(f == 0, ta, tn)
        lo[active] = lo_a
        hi[active] = hi_a
        active = active[~done]

    if active.size:
        raise SamplerError(f"exit-time inversion did not converge for {active.size} draws")
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise SamplerError("exit-time inversion produced a non-positive or non-finite time")
    return t.reshape(u.shape)


def _uniforms(rng: np.random.Generator, size: int) -> np.ndarray:
    u = rng.random(size)
    u[u == 0.0] = 2.0 ** -54
    return u


def sample_unit_exit_times(rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw `size` independent exit times of standard BM from (-1, 1)."""
    return invert_exit_cdf(_uniforms(rng, size))


def sample_unit_exit_time(rng: np.random.Generator) -> float:
    """Draw one exit time of standard BM from (-1, 1); E[tau] = 1."""
    return float(sample_unit_exit_times(rng, 1)[0])


def sample_increment(rng: np.random.Generator, eps: float) -> Tuple[float, int]:
    """One skeleton increment: (eps**2 * tau, fair sign)."""
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    tau = sample_unit_exit_time(rng)
    sign = 1 if rng.integers(0, 2) == 0 else -1
    return eps * eps * tau, sign


# ---------------------------------------------------------------------------
# Skeleton types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkeletonConfig:
    """Skeleton resolution, dimension, horizon and base seed."""

    eps: float
    dim: int = 1
    horizon: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.eps > 0:
            raise DomainError(f"eps must be positive, got {self.eps}")
        if self.dim < 1:
            raise DomainError(f"dim must be >= 1, got {self.dim}")
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if not 0 <= self.seed < 2 ** 64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True)
class HistoryVector:
    """(delta, sign vector) pairs of the first `stage` events."""

    stage: int
    entries: Tuple[Tuple[float, Tuple[int, ...]], ...]

    def partial_sums(self) -> np.ndarray:
        return np.cumsum([d for d, _ in self.entries])

    def as_array(self) -> np.ndarray:
        """Flatten to [delta_1, eta_1..., delta_2, eta_2..., ...]."""
        return np.array([x for d, s in self.entries for x in (d, *s)], dtype=float)


@dataclass(frozen=True, eq=False)
class Skeleton:
    """One realisation of the skeleton for a fixed eps."""

    eps: float
    dim: int
    deltas: np.ndarray      # (steps,)
    coords: np.ndarray      # (steps,) coordinate that moved
    signs: np.ndarray       # (steps, dim), one nonzero entry per row
    times: np.ndarray       # (steps,) T_1..T_steps
    walks: np.ndarray       # (dim, steps + 1), A at T_0=0..T_steps
    ident: str = ""

    @property
    def steps(self) -> int:
        return int(self.deltas.size)

    def history(self, n: int) -> HistoryVector:
        if not 0 <= n <= self.steps:
            raise DomainError(f"history stage {n} outside 0..{self.steps}")
        entries = tuple(
            (float(self.deltas[i]), tuple(int(v) for v in self.signs[i])) for i in range(n)
        )
        return HistoryVector(stage=n, entries=entries)


def skeleton_from_events(eps: float, dim: int, deltas: np.ndarray, coords: np.ndarray,
              sign_values: np.ndarray, ident: str = "") -> Skeleton:
    steps = deltas.size
    signs = np.zeros((steps, dim), dtype=np.int8)
    signs[np.arange(steps), coords] = sign_values
    walks = np.zeros((dim, steps + 1))
    walks[:, 1:] = eps * np.cumsum(signs, axis=0).T
    return Skeleton(
        eps=float(eps), dim=int(dim), deltas=deltas, coords=coords.astype(np.int64),
        signs=signs, times=np.cumsum(deltas), walks=walks, ident=ident,
    )


def num_steps(eps: float, horizon: float, dim: int = 1) -> int:
    """Stages needed to cover `horizon`: dim * ceil(eps**-2 * horizon)."""
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    if not horizon > 0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    if dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    x = horizon / (eps * eps)
    # absorb the rounding noise of e.g. 1 / 0.1**2 = 100.00000000000001
    return int(dim * max(1, math.ceil(x - 1e-9 * max(1.0, x))))


def _merge_coordinates(eps: float, dim: int, steps: int, rng: np.random.Generator):
    streams = []
    for _ in range(dim):
        taus = sample_unit_exit_times(rng, steps)
        bits = rng.integers(0, 2, size=steps)
        streams.append((np.cumsum(eps * eps * taus), 1 - 2 * bits))

    # heap ordered on (time, coordinate): simultaneous exits go to the lower index
    heap = [(streams[c][0][0], c, 0) for c in range(dim)]
    heapq.heapify(heap)
    times = np.empty(steps)
    coords = np.empty(steps, dtype=np.int64)
    sign_values = np.empty(steps, dtype=np.int8)
    for n in range(steps):
        t, c, j = heapq.heappop(heap)
        times[n] = t
        coords[n] = c
        sign_values[n] = streams[c][1][j]
        if j + 1 < steps:
            heapq.heappush(heap, (streams[c][0][j + 1], c, j + 1))
    deltas = np.diff(times, prepend=0.0)
    return deltas, coords, sign_values


def build_skeleton(cfg: SkeletonConfig, steps: int, rng: np.random.Generator,
                   ident: str = "") -> Skeleton:
    """Simulate `steps` skeleton events from one generator."""
    if steps < 0:
        raise DomainError(f"steps must be non-negative, got {steps}")
    eps = cfg.eps
    if cfg.dim == 1:
        u = _uniforms(rng, steps)
        bits = rng.integers(0, 2, size=steps)
        deltas = eps * eps * invert_exit_cdf(u) if steps else np.empty(0)
        return skeleton_from_events(eps, 1, deltas, np.zeros(steps, dtype=np.int64),
                         (1 - 2 * bits).astype(np.int8), ident)
    if steps == 0:
        return skeleton_from_events(eps, cfg.dim, np.empty(0), np.empty(0, dtype=np.int64),
                         np.empty(0, dtype=np.int8), ident)
    deltas, coords, sign_values = _merge_coordinates(eps, cfg.dim, steps, rng)
    return skeleton_from_events(eps, cfg.dim, deltas, coords, sign_values, ident)


def grid_query(s: Skeleton, t: float) -> Tuple[int, float]:
    """Return (N(t), last grid time <= t) with N(t) = #{n : T_n <= t}."""
    if t < 0:
        raise DomainError(f"grid_query needs t >= 0, got {t}")
    count = int(np.searchsorted(s.times, t, side="right"))
    last = float(s.times[count - 1]) if count else 0.0
    return count, last


# ---------------------------------------------------------------------------
# Batches of skeletons
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SkeletonBatch:
    """N skeletons with the same eps, dimension and number of steps."""

    eps: float
    dim: int
    deltas: np.ndarray      # (N, steps)
    coords: np.ndarray      # (N, steps)
    signs: np.ndarray       # (N, steps, dim)
    times: np.ndarray       # (N, steps)
    walks: np.ndarray       # (N, dim, steps + 1)
    idents: List[str] = field(default_factory=list)

    @property
    def n_paths(self) -> int:
        return int(self.deltas.shape[0])

    @property
    def steps(self) -> int:
        return int(self.deltas.shape[1])

    def grid_times(self) -> np.ndarray:
        """(N, steps + 1) grid times including T_0 = 0."""
        return np.concatenate([np.zeros((self.n_paths, 1)), self.times], axis=1)

    def walk_increments(self, coord: int = 0) -> np.ndarray:
        return np.diff(self.walks[:, coord, :], axis=1)

    def skeleton(self, i: int) -> Skeleton:
        ident = self.idents[i] if i < len(self.idents) else ""
        return Skeleton(
            eps=self.eps, dim=self.dim, deltas=self.deltas[i], coords=self.coords[i],
            signs=self.signs[i], times=self.times[i], walks=self.walks[i], ident=ident,
        )

    @classmethod
    def stack(cls, skeletons: Sequence[Skeleton]) -> "SkeletonBatch":
        if not skeletons:
            raise DomainError("cannot stack an empty list of skeletons")
        first = skeletons[0]
        if any(s.steps != first.steps or s.dim != first.dim or s.eps != first.eps for s in skeletons):
            raise DomainError("skeletons in a batch must share eps, dim and steps")
        return cls(
            eps=first.eps, dim=first.dim,
            deltas=np.stack([s.deltas for s in skeletons]),
            coords=np.stack([s.coords for s in skeletons]),
            signs=np.stack([s.signs for s in skeletons]),
            times=np.stack([s.times for s in skeletons]),
            walks=np.stack([s.walks for s in skeletons]),
            idents=[s.ident for s in skeletons],
        )

    @classmethod
    def concat(cls, batches: Sequence["SkeletonBatch"]) -> "SkeletonBatch":
        first = batches[0]
        return cls(
            eps=first.eps, dim=first.dim,
            deltas=np.concatenate([b.deltas for b in batches]),
            coords=np.concatenate([b.coords for b in batches]),
            signs=np.concatenate([b.signs for b in batches]),
            times=np.concatenate([b.times for b in batches]),
            walks=np.concatenate([b.walks for b in batches]),
            idents=[i for b in batches for i in b.idents],
        )


def as_batch(s: Union[Skeleton, SkeletonBatch]) -> SkeletonBatch:
    return s if isinstance(s, SkeletonBatch) else SkeletonBatch.stack([s])


def simulate_skeletons(cfg: SkeletonConfig, steps: int, n_paths: int, seed: Optional[int] = None,
                       tags: Sequence[int] = (), threads: int = 1) -> SkeletonBatch:
    """
    Simulate n_paths skeletons, path i drawing from its own stream (seed, tags, i).
    The seed defaults to cfg.seed.

    One-dimensional batches invert all exit times of a chunk in one vectorised
    call; the draw order per path is the same as build_skeleton's.
    """
    if n_paths < 1:
        raise DomainError(f"n_paths must be >= 1, got {n_paths}")
    tags = tuple(tags)
    seed = cfg.seed if seed is None else seed

    def one_chunk(start: int, stop: int) -> SkeletonBatch:
        idents = [f"seed={seed}/tags={list(tags)}/path={i}" for i in range(start, stop)]
        if cfg.dim > 1 or steps == 0:
            return SkeletonBatch.stack([
                build_skeleton(cfg, steps, path_stream(seed, i, tags), ident=idents[i - start])
                for i in range(start, stop)
            ])
        u = np.empty((stop - start, steps))
        bits = np.empty((stop - start, steps), dtype=np.int64)
        for row, i in enumerate(range(start, stop)):
            rng = path_stream(seed, i, tags)
            u[row] = _uniforms(rng, steps)
            bits[row] = rng.integers(0, 2, size=steps)
        deltas = cfg.eps * cfg.eps * invert_exit_cdf(u)
        sign_values = (1 - 2 * bits).astype(np.int8)
        walks = np.zeros((stop - start, 1, steps + 1))
        walks[:, 0, 1:] = cfg.eps * np.cumsum(sign_values, axis=1)
        return SkeletonBatch(
            eps=cfg.eps, dim=1, deltas=deltas,
            coords=np.zeros((stop - start, steps), dtype=np.int64),
            signs=sign_values[:, :, None], times=np.cumsum(deltas, axis=1),
            walks=walks, idents=idents,
        )

    chunks = map_path_chunks(one_chunk, n_paths, threads)
    batch = chunks[0] if len(chunks) == 1 else SkeletonBatch.concat(chunks)
    logger.debug(f"Simulated {n_paths} skeletons, eps={cfg.eps}, steps={steps}")
    return batch


# ---------------------------------------------------------------------------
# Binary record stream
# ---------------------------------------------------------------------------

def dump_skeleton(s: Skeleton, path: Union[str, Path]) -> Path:
    """Write count (u64) followed by (delta f64, coord u8, sign i8) records, little-endian."""
    records = np.empty(s.steps, dtype=RECORD_DTYPE)
    records["delta"] = s.deltas
    records["coord"] = s.coords
    records["sign"] = s.signs[np.arange(s.steps), s.coords]
    path = Path(path)
    with open(path, "wb") as f:
        f.write(np.array([s.steps], dtype="<u8").tobytes())
        f.write(records.tobytes())
    return path


def load_skeleton(path: Union[str, Path], eps: float, dim: Optional[int] = None,
                  ident: str = "") -> Skeleton:
    """Read a record stream written by dump_skeleton."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DomainError(f"{path}: truncated skeleton dump")
    count = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    expected = 8 + count * RECORD_DTYPE.itemsize
    if len(raw) != expected:
        raise DomainError(f"{path}: expected {expected} bytes for {count} records, found {len(raw)}")
    records = np.frombuffer(raw[8:], dtype=RECORD_DTYPE, count=count)
    coords = records["coord"].astype(np.int64)
    if dim is None:
        dim = int(coords.max()) + 1 if count else 1
    return skeleton_from_events(eps, dim, records["delta"].astype(float), coords,
                     records["sign"].astype(np.int8), ident)

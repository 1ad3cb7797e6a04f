"""
Reproducible random streams.

Every path gets its own counter-based generator derived from
(seed, tags..., path index), so a path's draws never depend on how many
other paths were simulated or on how they were split across threads.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

# Stream tags used by the experiment runner.
TRAIN_TAG = 1
FRESH_TAG = 2
FINE_PATH_TAG = 3


def path_stream(seed: int, path_index: int, tags: Sequence[int] = ()) -> np.random.Generator:
    """Philox generator for one path."""
    entropy = [int(seed), *[int(t) for t in tags], int(path_index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def chunk_ranges(n_items: int, n_chunks: int):
    """Split range(n_items) into at most n_chunks contiguous (start, stop) pairs."""
    n_chunks = max(1, min(int(n_chunks), max(1, n_items)))
    bounds = np.linspace(0, n_items, n_chunks + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def map_path_chunks(fn, n_items: int, threads: int = 1):
    """Apply fn(start, stop) over path chunks and return results in path order."""
    ranges = chunk_ranges(n_items, threads)
    if threads <= 1 or len(ranges) <= 1:
        return [fn(a, b) for a, b in ranges]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [executor.submit(fn, a, b) for a, b in ranges]
        return [f.result() for f in futures]

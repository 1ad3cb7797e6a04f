import sys
import time
from pathlib import Path

# Ensure repo root is on PYTHONPATH for imports
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
from snell.rng import path_stream
from snell.skeleton import SkeletonConfig, simulate_skeletons


def test_perf_100k_exit_times():
    t0 = time.time()
    batch = simulate_skeletons(SkeletonConfig(0.25), 16, 6250, seed=1)
    t1 = time.time()
    duration = t1 - t0
    # 100k inversions; 5s is a generous baseline
    assert duration < 5.0, f"Sampler too slow: {duration}s"
    assert batch.deltas.size == 100_000


def test_perf_stream_setup():
    t0 = time.time()
    for i in range(10_000):
        path_stream(1, i)
    duration = time.time() - t0
    assert duration < 5.0, f"Stream setup too slow: {duration}s"

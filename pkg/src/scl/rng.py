"""Counter-based per-path Gaussian streams.

Every Monte Carlo path owns a Philox stream keyed by the run seed with the
path index in the high counter word, so the noise of path ``i`` depends only
on ``(seed, i, steps)``. Results are therefore independent of how paths are
split across workers and of the total path count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def worker_count() -> int:
    """Number of worker threads, capped by the ``SCL_THREADS`` variable."""
    cap = os.environ.get("SCL_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def _key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).generate_state(2, np.uint64)


def path_generator(seed: int, path: int) -> np.random.Generator:
    """Generator for a single path."""
    counter = np.array([0, 0, 0, path], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_key(seed), counter=counter))


def standard_normals(seed: int, paths: int, steps: int, first_path: int = 0) -> np.ndarray:
    """Array of shape ``(paths, steps)`` of independent N(0, 1) draws.

    Row ``r`` is the stream of path ``first_path + r``.
    """
    out = np.empty((paths, steps))
    key = _key(seed)
    workers = min(worker_count(), max(1, paths // 4096))
    if workers <= 1:
        counter = np.zeros(4, dtype=np.uint64)
        for r in range(paths):
            counter[3] = first_path + r
            gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
            out[r] = gen.standard_normal(steps)
        return out
    chunks = np.linspace(0, paths, workers + 1).astype(int)

    def job(c):
        lo, hi = chunks[c], chunks[c + 1]
        counter = np.zeros(4, dtype=np.uint64)
        for r in range(lo, hi):
            counter[3] = first_path + r
            gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
            out[r] = gen.standard_normal(steps)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(job, range(workers)))
    return out


def brownian_increments(seed: int, paths: int, steps: int, dt: float) -> np.ndarray:
    """Brownian increments ``dW`` of shape ``(paths, steps)`` with variance ``dt``."""
    z = standard_normals(seed, paths, steps)
    z *= np.sqrt(dt)
    return z


def sub_seed(seed: int, *tags: int) -> int:
    """Independent 64-bit seed derived from ``seed`` and integer tags."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(t) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])

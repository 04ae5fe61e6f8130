"""Deterministic random-stream derivation and replica fan-out.

Every Monte Carlo replica owns its own numpy Generator whose seed is
derived from (base seed, replica index) by ``base ^ splitmix64(index)``.
The derivation is a pure function, so results do not depend on which
worker process executes which replica, and re-runs are bit-for-bit
reproducible for any worker count.
"""

from __future__ import annotations

import multiprocessing
import os

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(z: int) -> int:
    """One output of the splitmix64 mixing function (finalizer included)."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def replica_seed(base_seed: int, replica_index: int) -> int:
    """Counter-mix: base seed XOR splitmix64 of the replica index."""
    return (int(base_seed) & _MASK64) ^ splitmix64(int(replica_index))


def replica_rng(base_seed: int, replica_index: int) -> np.random.Generator:
    return np.random.default_rng(replica_seed(base_seed, replica_index))


def resolve_workers(workers: int | None) -> int:
    """CLI --workers, else BHP_LAB_WORKERS, else 1."""
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("BHP_LAB_WORKERS")
    return max(1, int(env)) if env else 1


def _chunk_worker(args):
    fn, payload, base_seed, lo, hi = args
    return [fn(payload, i, replica_rng(base_seed, i)) for i in range(lo, hi)]


def map_replicas(fn, payload, n_replicas, base_seed, workers=1, index_offset=0):
    """Run ``fn(payload, index, rng)`` for index in [offset, offset + n).

    Returns the per-replica results as a list ordered by replica index,
    identical for any worker count.  ``fn`` and ``payload`` must be
    picklable when workers > 1.
    """
    workers = max(1, int(workers))
    lo0, hi0 = index_offset, index_offset + n_replicas
    if workers == 1 or n_replicas < 2 * workers:
        return [fn(payload, i, replica_rng(base_seed, i)) for i in range(lo0, hi0)]
    step = -(-n_replicas // (workers * 4))
    chunks = [
        (fn, payload, base_seed, lo, min(lo + step, hi0))
        for lo in range(lo0, hi0, step)
    ]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(workers) as pool:
        parts = pool.map(_chunk_worker, chunks)
    out = []
    for part in parts:
        out.extend(part)
    return out

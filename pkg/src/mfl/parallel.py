"""Deterministic replica-block map.

Replicas are split into fixed-size blocks independent of the worker count,
each block draws from index-derived substreams, and results are concatenated
in block order.  Output is therefore identical for any ``jobs``.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

REPLICA_BLOCK = 1000

_TASK: Callable | None = None
_BLOCKS: list | None = None


def _run(i: int):
    return _TASK(_BLOCKS[i])


def split_blocks(keys: Sequence, block: int = REPLICA_BLOCK) -> list:
    keys = list(keys)
    return [keys[i : i + block] for i in range(0, len(keys), block)]


def block_map(fn: Callable[[list], dict], keys: Sequence, jobs: int = 1, block: int = REPLICA_BLOCK) -> dict:
    """Apply fn to fixed blocks of replica keys and concatenate each returned array along axis 0."""
    global _TASK, _BLOCKS
    blocks = split_blocks(keys, block)
    jobs = max(1, min(int(jobs), len(blocks)))
    if jobs == 1 or "fork" not in mp.get_all_start_methods():
        parts = [fn(b) for b in blocks]
    else:
        _TASK, _BLOCKS = fn, blocks
        try:
            with ProcessPoolExecutor(jobs, mp_context=mp.get_context("fork")) as pool:
                parts = list(pool.map(_run, range(len(blocks))))
        finally:
            _TASK = _BLOCKS = None
    out = {}
    for name in parts[0]:
        vals = [p[name] for p in parts]
        out[name] = None if vals[0] is None else np.concatenate(vals, axis=0)
    return out


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)

"""Index-derived random substreams.

Every random quantity in the package is drawn from a generator derived from
``(master_seed, tag, index)``.  Two draws share a stream only when all three
coincide, so results never depend on execution order or worker count.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

DEFAULT_SEED = 20240601

# fixed tag codes; adding a tag must never renumber an existing one
TAGS = {
    "fbm": 1,
    "bm": 2,
    "fast": 3,
    "hat_w": 4,
    "init": 5,
    "cell": 6,
    "outer": 7,
    "aux": 8,
}


def default_seed() -> int:
    value = os.environ.get("MFL_SEED")
    return int(value) if value not in (None, "") else DEFAULT_SEED


def _tag_code(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    try:
        return TAGS[tag]
    except KeyError:
        raise ValueError(f"unknown stream tag {tag!r}; known: {sorted(TAGS)}") from None


def substream(seed: int, tag: str | int, *index: int) -> np.random.Generator:
    """Generator for ``(seed, tag, *index)``; disjoint keys give independent streams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_tag_code(tag), *map(int, index)))
    return np.random.Generator(np.random.PCG64(ss))


def substreams(seed: int, tag: str | int, indices, *prefix: int) -> list[np.random.Generator]:
    return [substream(seed, tag, *prefix, int(i)) for i in indices]


def array_checksum(arr: np.ndarray) -> str:
    """sha256 of the raw little-endian float64 bytes; used in reproducibility sidecars."""
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    return hashlib.sha256(a.tobytes()).hexdigest()

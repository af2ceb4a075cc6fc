"""Seeded random streams and the pair-deterministic compatibility hash."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

_MASK64 = (1 << 64) - 1

# fixed stream labels; never renumber
STREAM_ARRIVALS = 0
STREAM_SOJOURNS = 1
STREAM_COMPAT = 2
STREAM_SELECTION = 3


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def pair_uniform(key: int, i: int, j: int) -> float:
    """Uniform in [0, 1) for the unordered pair {i, j} under ``key``."""
    lo, hi = (i, j) if i < j else (j, i)
    counter = ((lo & 0xFFFFFFFF) << 32) | (hi & 0xFFFFFFFF)
    h = splitmix64(key ^ splitmix64(counter))
    return (h >> 11) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def _splitmix64(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def pair_uniform_jit(key, i, j):
    if i < j:
        lo = np.uint64(i)
        hi = np.uint64(j)
    else:
        lo = np.uint64(j)
        hi = np.uint64(i)
    counter = (lo << np.uint64(32)) | hi
    h = _splitmix64(key ^ _splitmix64(counter))
    return np.float64(h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def stream_seed(master: int, label: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master) & _MASK64, spawn_key=(label,))


@dataclass
class RngStreams:
    """The four independent streams a run draws from.

    Each is derived from the master seed by a fixed label, so paired runs
    with different policies see identical arrivals, sojourns and
    compatibility graph.
    """

    arrivals: np.random.Generator
    sojourns: np.random.Generator
    selection: np.random.Generator
    compat_key: int

    @classmethod
    def from_seed(cls, master: int) -> RngStreams:
        compat_key = int(stream_seed(master, STREAM_COMPAT).generate_state(1, np.uint64)[0])
        return cls(
            arrivals=np.random.default_rng(stream_seed(master, STREAM_ARRIVALS)),
            sojourns=np.random.default_rng(stream_seed(master, STREAM_SOJOURNS)),
            selection=np.random.default_rng(stream_seed(master, STREAM_SELECTION)),
            compat_key=compat_key,
        )


def derive_seed(master: int, *labels: int | str) -> int:
    """Pure 64-bit seed from a master seed and a tuple of labels.

    String labels are hashed stably (not with ``hash``), so a run's seed
    depends on what it is, not where it sits in a sweep.
    """
    words = [int(master) & _MASK64]
    for lab in labels:
        if isinstance(lab, str):
            acc = 0xCBF29CE484222325
            for b in lab.encode():
                acc = ((acc ^ b) * 0x100000001B3) & _MASK64
            words.append(acc)
        else:
            words.append(int(lab) & _MASK64)
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)

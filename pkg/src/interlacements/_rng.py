"""Seeded random streams.

Every stochastic task draws from its own stream, identified by ``(seed, key)``
where ``key`` is a tuple of small integers (stream kind, task index, ...).
Host-side draws use numpy's counter-based Philox generator; the numba walk
kernels use SplitMix64, itself a counter-based generator keyed by a 64-bit
value taken from the task's Philox stream.  Nothing depends on which worker
process runs a task.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# stream kinds, used as the first element of a key
SOUP = 1
EQUILIBRIUM = 2
GREEN_MC = 3
WALK = 4
TEST = 99

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for task ``key`` under master ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def kernel_key(rng: np.random.Generator) -> np.uint64:
    """64-bit SplitMix key for a numba kernel, drawn from ``rng``."""
    return rng.integers(0, 2**64, dtype=np.uint64, endpoint=False)


def stream_id(seed: int, *key: int) -> str:
    return f"{int(seed)}:" + "/".join(str(int(k)) for k in key)


# --- numba side -----------------------------------------------------------
# Generator state lives in a length-3 uint64 array: [counter, digit buffer,
# digits left].  Kernels mutate it in place.  Walk directions are base-2d
# digits of accepted 64-bit words, which is exact and avoids a data-dependent
# rejection branch on every step.


@njit(cache=True)
def new_state(key):
    s = np.zeros(3, dtype=np.uint64)
    s[0] = key
    return s


@njit(cache=True, inline="always")
def next_u64(s):
    s[0] = s[0] + _GOLDEN
    z = s[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def next_u53(s):
    return next_u64(s) >> np.uint64(11)


@njit(cache=True)
def digit_params(base):
    """(base, base**D, acceptance limit, D) for drawing base-``base`` digits.

    A word x < limit is accepted and x mod base**D yields D independent
    uniform digits.
    """
    b = np.uint64(base)
    P = np.uint64(1)
    D = 0
    top = np.uint64(1) << np.uint64(62)
    while P <= top // b:
        P = P * b
        D += 1
    q = np.uint64(0xFFFFFFFFFFFFFFFF) // P
    return b, P, q * P, D


@njit(cache=True, inline="always")
def next_digit(s, b, P, lim, D):
    if s[2] == np.uint64(0):
        x = next_u64(s)
        while x >= lim:
            x = next_u64(s)
        s[1] = x % P
        s[2] = np.uint64(D)
    x = s[1]
    # literal divisors compile to multiplications; d = 3 and d = 4 hit these
    if b == np.uint64(6):
        c = x % np.uint64(6)
        x = x // np.uint64(6)
    elif b == np.uint64(8):
        c = x & np.uint64(7)
        x = x >> np.uint64(3)
    else:
        c = x % b
        x = x // b
    s[1] = x
    s[2] = s[2] - np.uint64(1)
    return np.int64(c)


def splitmix_reference(key: int, count: int) -> list[int]:
    """Pure-Python SplitMix64 outputs, for cross-checking the kernel."""
    m = (1 << 64) - 1
    out = []
    state = key & m
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & m
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
        out.append(z ^ (z >> 31))
    return out

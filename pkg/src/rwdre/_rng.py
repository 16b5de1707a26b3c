"""Counter-based random numbers for reproducible parallel Monte Carlo.

Every random draw is a pure function ``draw(key, counter)`` of a 64-bit
stream key and a counter. Keys are derived by hashing ``(parent, tag)`` tuples,
so a replica, walker or lattice site owns a stream that does not depend on
which thread runs it or in which order.

The mixer is the SplitMix64 finalizer. Mixing the counter before combining it
with the key means two streams never share a run of outputs, only isolated
values at the 2^-64 level.
"""

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0
_COORD_OFFSET = 1 << 40

# stream purposes
ANNEALED = 1
QUENCHED_ENV = 2
QUENCHED_WALKER = 3
SITE = 4
DIRECTIONS = 5


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def derive(parent, tag):
    """Child key for ``(parent, tag)``; ``tag`` is a non-negative integer."""
    t = mix64(np.uint64(tag) * _GOLDEN + _GOLDEN)
    return mix64(mix64(parent ^ t) + _GOLDEN)


@nb.njit(cache=True, inline="always")
def draw(key, counter):
    """Raw 64-bit output number ``counter`` of stream ``key``."""
    return mix64(key ^ mix64(np.uint64(counter) * _GOLDEN + _GOLDEN))


@nb.njit(cache=True, inline="always")
def uniform(key, counter):
    return np.float64(draw(key, counter) >> _S11) * _INV53


@nb.njit(cache=True, inline="always")
def categorical(cum, u):
    """Index ``i`` with ``cum[i-1] <= u < cum[i]``; ``cum`` is a CDF row."""
    n = cum.shape[0]
    for i in range(n - 1):
        if u < cum[i]:
            return i
    return n - 1


@nb.njit(cache=True)
def site_key(env_key, coords):
    k = derive(env_key, SITE)
    for c in coords:
        k = derive(k, c + _COORD_OFFSET)
    return k


def root_key(seed: int) -> np.uint64:
    """Stream key for a user-facing integer seed."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.uint64(derive(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), 0))


def purpose_key(seed: int, purpose: int) -> np.uint64:
    return np.uint64(derive(root_key(seed), purpose))


def child_key(parent, tag: int) -> np.uint64:
    return np.uint64(derive(np.uint64(parent), tag))


def uniforms(key, n: int, start: int = 0) -> np.ndarray:
    """``n`` consecutive uniforms of one stream; convenience for Python callers."""
    return _uniforms(np.uint64(key), n, start)


@nb.njit(cache=True)
def _uniforms(key, n, start):
    out = np.empty(n)
    for i in range(n):
        out[i] = uniform(key, start + i)
    return out

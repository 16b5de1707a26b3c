"""Monte Carlo engine for walks in a Markovian dynamic environment.

Annealed runs give every replica a fresh environment that is sampled lazily:
a site only stores the time and state of its last observation, and a revisit
after ``k`` steps draws the new state from row ``p^k[state]`` (or from ``pi``
on the first visit). This is exact because the unobserved chain evolution
collapses to a ``k``-step transition.

Quenched runs share one environment between many walkers. A site's whole
trajectory up to the horizon is generated on first touch from a stream keyed
by ``(environment seed, site)`` only, so it does not matter which walker
touches it first.

All randomness is counter based (:mod:`rwdre._rng`): replica ``r`` of an
annealed run uses draws ``2t`` (site state) and ``2t + 1`` (jump) of its own
stream at time ``t``; a quenched walker uses draw ``t`` of its stream and a
site uses draw ``t`` of the site stream for its state at time ``t``.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import _rng
from .errors import GuardViolation, HorizonExceeded, TimeOrderViolation

ANNEALED_LAZY = "annealed-lazy"
QUENCHED_SHARED = "quenched-shared"
BLOCK = 256
DIGEST_RADIUS = 2
# bytes of per-site bookkeeping allowed for one quenched environment
QUENCHED_MEMORY_GUARD = 2 * 10**9
# last read time and state, stream key, code, coordinates, two hash-table slots
# one 32-byte hash slot per site, table at most half full
QUENCHED_BYTES_PER_SITE = 64


def _cumulative(rows):
    cum = np.cumsum(np.asarray(rows, dtype=float), axis=-1)
    cum[..., -1] = 1.0
    return np.ascontiguousarray(cum)


@dataclass(frozen=True, eq=False)
class _Tables:
    cum_pi: np.ndarray
    cum_pow: np.ndarray  # cum_pow[k] = CDF rows of p^k, k = 0..K
    cum_q: np.ndarray
    sym_index: np.ndarray  # (state, jump) -> symbol index, -1 if q == 0
    jump_vecs: np.ndarray
    width: int
    jump_codes: np.ndarray

    @classmethod
    def build(cls, model, n):
        chain = model.chain
        kmax = min(chain.cutoff, max(n, 1))
        sym = np.full((model.n_states, model.n_jumps), -1, dtype=np.int64)
        for i, s in enumerate(model.symbols.symbols):
            sym[s.state, s.jump] = i
        reach = max(int(np.abs(model.jumps).max()), 1)
        width = 2 * n * reach + 1
        if width ** model.d >= 2**62:
            raise GuardViolation(f"lattice box {width}^{model.d} too large to encode sites",
                                 guard="SITE_CODE", value=width ** model.d)
        radix = width ** np.arange(model.d, dtype=np.int64)
        return cls(
            cum_pi=_cumulative(chain.pi),
            cum_pow=_cumulative(chain.power_table(kmax)),
            cum_q=_cumulative(model.q),
            sym_index=sym,
            jump_vecs=np.ascontiguousarray(model.jumps, dtype=np.int64),
            width=width,
            jump_codes=model.jumps @ radix,
        )


@nb.njit(cache=True, inline="always")
def _slot(code, mask, shift):
    return np.int64((np.uint64(code) * np.uint64(0x9E3779B97F4A7C15)) >> np.uint64(shift)) & mask


@nb.njit(cache=True, inline="always")
def _annealed_state(u, gap, prev, cum_pi, cum_pow):
    kmax = cum_pow.shape[0] - 1
    if gap == 0 or gap > kmax:
        return _rng.categorical(cum_pi, u)
    return _rng.categorical(cum_pow[gap, prev], u)


@nb.njit(cache=True, parallel=True, nogil=True)
def _annealed_kernel(keys, n, cum_pi, cum_pow, cum_q, jump_codes, sym_index,
                     counts, words, block, pre_state, pre_jump):
    n_rep = keys.shape[0]
    n_jumps = cum_q.shape[1]
    n_pre = pre_state.shape[0]
    record = words.shape[0] > 0
    bits = 4
    while (1 << bits) < 2 * (n + 1):
        bits += 1
    cap = 1 << bits
    mask = cap - 1
    shift = 64 - bits
    n_blocks = (n_rep + block - 1) // block
    for blk in nb.prange(n_blocks):
        tcode = np.zeros(cap, dtype=np.int64)
        tstamp = np.zeros(cap, dtype=np.int64)
        ttime = np.zeros(cap, dtype=np.int64)
        tstate = np.zeros(cap, dtype=np.int64)
        lo = blk * block
        hi = min(lo + block, n_rep)
        for r in range(lo, hi):
            stamp = r + 1
            key = keys[r]
            code = 0
            for v in range(n_jumps):
                counts[r, v] = 0
            for t in range(n):
                s = _slot(code, mask, shift)
                while tstamp[s] == stamp and tcode[s] != code:
                    s = (s + 1) & mask
                if tstamp[s] == stamp:
                    gap = t - ttime[s]
                    prev = tstate[s]
                else:
                    gap = 0
                    prev = 0
                    tstamp[s] = stamp
                    tcode[s] = code
                if t < n_pre:
                    a = pre_state[t]
                else:
                    a = _annealed_state(_rng.uniform(key, 2 * t), gap, prev, cum_pi, cum_pow)
                ttime[s] = t
                tstate[s] = a
                if t < n_pre:
                    v = pre_jump[t]
                else:
                    v = _rng.categorical(cum_q[a], _rng.uniform(key, 2 * t + 1))
                counts[r, v] += 1
                if record:
                    words[r, t] = sym_index[a, v]
                code += jump_codes[v]


@nb.njit(cache=True, nogil=True)
def _site_trajectory(skey, horizon, cum_pi, cum_p1, out):
    x = _rng.categorical(cum_pi, _rng.uniform(skey, 0))
    out[0] = x
    for t in range(1, horizon + 1):
        x = _rng.categorical(cum_p1[x], _rng.uniform(skey, t))
        out[t] = x


@nb.njit(cache=True, nogil=True, inline="always")
def _decisive(u, dlo, dhi):
    # the state every row of p sends u to, or -1 if rows disagree
    for j in range(dlo.shape[0]):
        if dlo[j] <= u < dhi[j]:
            return j
    return -1


@nb.njit(cache=True, nogil=True)
def _site_state(skey, t, last_t, last_x, cum_pi, cum_p1, dlo, dhi):
    """State at time ``t`` of the trajectory that :func:`_site_trajectory` generates.

    Scans back from ``t`` to the latest step whose update sends every state to
    the same value, or to the known state at ``last_t`` (``-1`` if none), then
    replays forward. The value is identical to reading the full trajectory.
    """
    s = t
    x = last_x
    start = last_t
    while s > last_t:
        if s == 0:
            x = _rng.categorical(cum_pi, _rng.uniform(skey, 0))
            start = 0
            break
        c = _decisive(_rng.uniform(skey, s), dlo, dhi)
        if c >= 0:
            x = c
            start = s
            break
        s -= 1
    for r in range(start + 1, t + 1):
        x = _rng.categorical(cum_p1[x], _rng.uniform(skey, r))
    return x


def decisive_intervals(cum_p1):
    """``[lo_j, hi_j)``: uniforms that every row of the CDF table maps to ``j``."""
    k = cum_p1.shape[0]
    lo = np.zeros(k)
    hi = np.full(k, np.inf)
    for j in range(k):
        if j:
            lo[j] = cum_p1[:, j - 1].max()
        if j < k - 1:
            hi[j] = cum_p1[:, j].min()
    return lo, hi


# hash slot layout for quenched sites: code, last read time (-1 = empty), state, stream key
_CODE, _LAST_T, _LAST_X, _SKEY = 0, 1, 2, 3


@nb.njit(cache=True, nogil=True)
def _quenched_steps(env_key, walker_keys, n, cum_pi, cum_p1, dlo, dhi, cum_q, jump_vecs,
                    jump_codes, sym_index, counts, words, table, bits, code, pos, cursor):
    # runs from cursor = (t, w, n_sites) until done (returns 0) or the table is full (1)
    n_walk = walker_keys.shape[0]
    d = jump_vecs.shape[1]
    record = words.shape[0] > 0
    mask = table.shape[0] - 1
    shift = 64 - bits
    n_sites = cursor[2]
    w0 = cursor[1]
    for t in range(cursor[0], n):
        for w in range(w0, n_walk):
            c = code[w]
            s = _slot(c, mask, shift)
            while table[s, _LAST_T] >= 0 and table[s, _CODE] != c:
                s = (s + 1) & mask
            if table[s, _LAST_T] < 0:
                if 2 * (n_sites + 1) > table.shape[0]:
                    cursor[0] = t
                    cursor[1] = w
                    cursor[2] = n_sites
                    return 1
                sk = _rng.site_key(env_key, pos[w])
                table[s, _CODE] = c
                table[s, _SKEY] = np.int64(sk)
                table[s, _LAST_X] = _site_state(sk, t, -1, 0, cum_pi, cum_p1, dlo, dhi)
                table[s, _LAST_T] = t
                n_sites += 1
            elif table[s, _LAST_T] != t:
                table[s, _LAST_X] = _site_state(np.uint64(table[s, _SKEY]), t, table[s, _LAST_T],
                                                table[s, _LAST_X], cum_pi, cum_p1, dlo, dhi)
                table[s, _LAST_T] = t
            a = table[s, _LAST_X]
            v = _rng.categorical(cum_q[a], _rng.uniform(walker_keys[w], t))
            counts[w, v] += 1
            if record:
                words[w, t] = sym_index[a, v]
            code[w] = c + jump_codes[v]
            for i in range(d):
                pos[w, i] += jump_vecs[v, i]
        w0 = 0
    cursor[0] = n
    cursor[1] = 0
    cursor[2] = n_sites
    return 0


@nb.njit(cache=True, nogil=True)
def _rehash_sites(table, bits):
    cap = 1 << bits
    out = np.zeros((cap, 4), dtype=np.int64)
    out[:, _LAST_T] = -1
    for j in range(table.shape[0]):
        if table[j, _LAST_T] < 0:
            continue
        s = _slot(table[j, _CODE], cap - 1, 64 - bits)
        while out[s, _LAST_T] >= 0:
            s = (s + 1) & (cap - 1)
        out[s] = table[j]
    return out


@nb.njit(cache=True, nogil=True)
def _quenched_kernel(env_key, walker_keys, n, cum_pi, cum_p1, dlo, dhi, cum_q, jump_vecs,
                     jump_codes, sym_index, counts, words, max_sites):
    """One shared environment; all walkers advance together in time.

    Each touched site keeps the last time it was read and its state then; a
    later read continues the same site stream with :func:`_site_state`.
    Returns the number of touched sites, their codes and their states at time
    ``n``, or ``-1`` once more than ``max_sites`` sites are touched.
    """
    n_walk = walker_keys.shape[0]
    d = jump_vecs.shape[1]
    bits = 12
    table = np.zeros((1 << bits, 4), dtype=np.int64)
    table[:, _LAST_T] = -1
    code = np.zeros(n_walk, dtype=np.int64)
    pos = np.zeros((n_walk, d), dtype=np.int64)
    cursor = np.zeros(3, dtype=np.int64)
    counts[:, :] = 0
    # the stepping loop never reallocates; the table grows here between calls
    while _quenched_steps(env_key, walker_keys, n, cum_pi, cum_p1, dlo, dhi, cum_q, jump_vecs,
                          jump_codes, sym_index, counts, words, table, bits, code, pos, cursor):
        if cursor[2] >= max_sites:
            return -1, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        bits += 1
        table = _rehash_sites(table, bits)
    n_sites = cursor[2]
    codes = np.empty(n_sites, dtype=np.int64)
    final = np.empty(n_sites, dtype=np.int64)
    k = 0
    for j in range(table.shape[0]):
        if table[j, _LAST_T] >= 0:
            codes[k] = table[j, _CODE]
            final[k] = _site_state(np.uint64(table[j, _SKEY]), n, table[j, _LAST_T],
                                   table[j, _LAST_X], cum_pi, cum_p1, dlo, dhi)
            k += 1
    return n_sites, codes, final


def decode_sites(codes, width, d) -> np.ndarray:
    """Lattice coordinates from the balanced base-``width`` site codes."""
    half = (width - 1) // 2
    out = np.empty((codes.shape[0], d), dtype=np.int64)
    rest = codes.astype(np.int64)
    for i in range(d):
        r = (rest + half) % width - half
        out[:, i] = r
        rest = (rest - r) // width
    return out


@nb.njit(cache=True, nogil=True)
def _grow(arr, cap):
    out = np.zeros(cap, dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


@dataclass
class WalkSample:
    """Final position of one walk, optionally with its symbol history."""

    position: np.ndarray
    path: np.ndarray | None = None
    word: tuple | None = None


class EnvironmentCache:
    """Per-site environment records for one run.

    ``annealed-lazy`` keeps ``(last query time, state)`` per visited site and
    must be queried in increasing time order at each site. ``quenched-shared``
    keeps the full trajectory ``0..horizon`` of every touched site.
    """

    def __init__(self, model, mode=ANNEALED_LAZY, horizon=None, env_seed=None, env_index=0):
        if mode not in (ANNEALED_LAZY, QUENCHED_SHARED):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == QUENCHED_SHARED and (horizon is None or env_seed is None):
            raise ValueError("quenched-shared mode needs horizon and env_seed")
        self.model = model
        self.mode = mode
        self.horizon = horizon
        self.records = {}
        self._tables = _Tables.build(model, max(horizon or 1, 1))
        if mode == QUENCHED_SHARED:
            self.env_key = environment_key(env_seed, env_index)

    def trajectory(self, site) -> np.ndarray:
        """Full state trajectory of ``site`` (quenched mode); generated on first use."""
        site = tuple(int(c) for c in site)
        traj = self.records.get(site)
        if traj is None:
            traj = site_trajectory(self.model, self.env_key, site, self.horizon, self._tables)
            self.records[site] = traj
        return traj

    def state(self, site, time, key) -> int:
        site = tuple(int(c) for c in site)
        if self.mode == QUENCHED_SHARED:
            if time > self.horizon:
                raise HorizonExceeded(f"time {time} beyond horizon {self.horizon}",
                                      guard="horizon", value=time)
            return int(self.trajectory(site)[time])
        rec = self.records.get(site)
        u = float(_rng.uniform(np.uint64(key), 2 * time))
        if rec is None:
            gap, prev = 0, 0
        else:
            last, prev = rec
            if time <= last:
                raise TimeOrderViolation(
                    f"site {site} queried at time {time} after time {last}")
            gap = time - last
        chain = self.model.chain
        row = chain.pi if gap == 0 or gap > chain.cutoff else chain.power(gap)[prev]
        a = int(_rng.categorical(_cumulative(row), u))
        self.records[site] = (time, a)
        return a


def step(env: EnvironmentCache, position, time: int, key) -> tuple:
    """One move of a walker with stream ``key``; returns ``(state, jump index)``.

    Uses the same draws as the compiled kernels, so a walk stepped here
    reproduces the corresponding replica or walker exactly.
    """
    a = env.state(position, time, key)
    ctr = 2 * time + 1 if env.mode == ANNEALED_LAZY else time
    u = _rng.uniform(np.uint64(key), ctr)
    v = int(_rng.categorical(env._tables.cum_q[a], u))
    return a, v


def annealed_keys(seed: int, replicas: int, start: int = 0) -> np.ndarray:
    base = _rng.purpose_key(seed, _rng.ANNEALED)
    return _derive_many(base, start, replicas)


def environment_key(env_seed: int, env_index: int = 0):
    return _rng.child_key(_rng.purpose_key(env_seed, _rng.QUENCHED_ENV), env_index)


def walker_keys(walker_seed: int, walkers: int, env_index: int = 0) -> np.ndarray:
    base = _rng.child_key(_rng.purpose_key(walker_seed, _rng.QUENCHED_WALKER), env_index)
    return _derive_many(base, 0, walkers)


@nb.njit(cache=True)
def _derive_many(base, start, count):
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        out[i] = _rng.derive(base, start + i)
    return out


def site_trajectory(model, env_key, site, horizon, tables=None) -> np.ndarray:
    tables = tables or _Tables.build(model, max(horizon, 1))
    out = np.zeros(horizon + 1, dtype=np.int8)
    _site_trajectory(np.uint64(_rng.site_key(np.uint64(env_key), np.asarray(site, dtype=np.int64))),
                     horizon, tables.cum_pi, tables.cum_pow[1], out)
    return out


def walk_with_steps(model, n, key, env=None):
    """Slow reference walk driven by :func:`step` (annealed unless ``env`` given)."""
    env = env or EnvironmentCache(model, ANNEALED_LAZY, horizon=n)
    pos = np.zeros(model.d, dtype=np.int64)
    word = []
    path = [pos.copy()]
    for t in range(n):
        a, v = step(env, pos, t, key)
        word.append((a, v))
        pos = pos + model.jumps[v]
        path.append(pos.copy())
    return WalkSample(position=pos, path=np.array(path), word=tuple(word))


@dataclass(eq=False)
class AnnealedRun:
    n: int
    seed: int
    counts: np.ndarray = field(repr=False)  # (replicas, n_jumps) jump counts
    positions: np.ndarray = field(repr=False)
    words: np.ndarray | None = field(repr=False, default=None)

    @property
    def replicas(self) -> int:
        return self.positions.shape[0]

    def __iter__(self):
        for i in range(self.replicas):
            word = None if self.words is None else tuple(self.words[i].tolist())
            yield WalkSample(position=self.positions[i], word=word)


def _check_threads(threads):
    if threads is None:
        return
    nb.set_num_threads(max(1, min(int(threads), nb.config.NUMBA_NUM_THREADS)))


def run_annealed(model, n: int, replicas: int, seed: int, record_words: bool = False,
                 threads=None, start: int = 0, prefix=()) -> AnnealedRun:
    """Independent walks, each in its own freshly sampled environment.

    Replica ``i`` (global index ``start + i``) depends only on ``(seed, i)``.
    A ``prefix`` word forces the first symbols; the rest of each walk is then
    a sample of the law conditioned on that history.
    """
    if n < 1 or replicas < 1:
        raise ValueError("need n >= 1 and replicas >= 1")
    if len(prefix) > n:
        raise ValueError("prefix longer than the walk")
    for a, v in prefix:
        if model.q[a, v] <= 0:
            raise ValueError(f"({a}, {v}) is not a symbol")
    pre_state = np.array([s[0] for s in prefix], dtype=np.int64)
    pre_jump = np.array([s[1] for s in prefix], dtype=np.int64)
    if model.n_states > 127:
        raise GuardViolation("at most 127 states supported", guard="n_states",
                             value=model.n_states)
    _check_threads(threads)
    tab = _Tables.build(model, n)
    keys = annealed_keys(seed, replicas, start)
    counts = np.zeros((replicas, model.n_jumps), dtype=np.int64)
    words = np.zeros((replicas, n) if record_words else (0, n), dtype=np.int16)
    _annealed_kernel(keys, n, tab.cum_pi, tab.cum_pow, tab.cum_q, tab.jump_codes,
                     tab.sym_index, counts, words, BLOCK, pre_state, pre_jump)
    return AnnealedRun(n=n, seed=seed, counts=counts, positions=counts @ model.jumps,
                       words=words if record_words else None)


@dataclass(eq=False)
class QuenchedRun:
    n: int
    env_seed: int
    walker_seed: int
    env_index: int
    counts: np.ndarray = field(repr=False)
    positions: np.ndarray = field(repr=False)
    environment_digest: str = ""
    touched_digest: str = ""
    touched_sites: int = 0
    words: np.ndarray | None = field(repr=False, default=None)

    @property
    def walkers(self) -> int:
        return self.positions.shape[0]

    def __iter__(self):
        for i in range(self.walkers):
            word = None if self.words is None else tuple(self.words[i].tolist())
            yield WalkSample(position=self.positions[i], word=word)


def _hash_trajectories(coords, trajs) -> str:
    # sites in lexicographic order, then their trajectories in the same order
    order = np.lexsort(coords.T[::-1]) if coords.size else np.zeros(0, dtype=np.int64)
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(coords[order], dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(trajs[order], dtype=np.int8).tobytes())
    return h.hexdigest()


def _touched_digest(coords, final_states) -> str:
    # final states are a function of each site's whole stream up to the horizon
    return _hash_trajectories(coords, final_states.reshape(-1, 1))


def environment_digest(model, env_seed: int, horizon: int, env_index: int = 0,
                       radius: int = DIGEST_RADIUS) -> str:
    """64-bit hash of the trajectories of all sites within ``radius`` of the origin.

    It depends only on the environment seed and index, the model and the
    horizon, never on which walkers ran.
    """
    key = environment_key(env_seed, env_index)
    tab = _Tables.build(model, max(horizon, 1))
    grid = np.stack(np.meshgrid(*[np.arange(-radius, radius + 1)] * model.d, indexing="ij"),
                    axis=-1).reshape(-1, model.d)
    trajs = np.array([site_trajectory(model, key, site, horizon, tab) for site in grid])
    return _hash_trajectories(grid, trajs)


def run_quenched(model, n: int, walkers: int, env_seed: int, walker_seed: int,
                 env_index: int = 0, record_words: bool = False) -> QuenchedRun:
    """``walkers`` independent walks in one shared environment realization."""
    if n < 1 or walkers < 1:
        raise ValueError("need n >= 1 and walkers >= 1")
    if model.n_states > 127:
        raise GuardViolation("at most 127 states supported", guard="n_states",
                             value=model.n_states)
    tab = _Tables.build(model, n)
    ekey = environment_key(env_seed, env_index)
    wkeys = walker_keys(walker_seed, walkers, env_index)
    counts = np.zeros((walkers, model.n_jumps), dtype=np.int64)
    words = np.zeros((walkers, n) if record_words else (0, n), dtype=np.int16)
    max_sites = max(1, QUENCHED_MEMORY_GUARD // QUENCHED_BYTES_PER_SITE)
    dlo, dhi = decisive_intervals(tab.cum_pow[1])
    n_sites, codes, final = _quenched_kernel(
        ekey, wkeys, n, tab.cum_pi, tab.cum_pow[1], dlo, dhi, tab.cum_q, tab.jump_vecs, tab.jump_codes,
        tab.sym_index, counts, words, max_sites)
    if n_sites < 0:
        raise HorizonExceeded(
            f"quenched environment touches more than {max_sites} sites",
            guard="QUENCHED_MEMORY_GUARD", value=max_sites,
        )
    return QuenchedRun(
        n=n, env_seed=env_seed, walker_seed=walker_seed, env_index=env_index,
        counts=counts, positions=counts @ model.jumps,
        environment_digest=environment_digest(model, env_seed, n, env_index),
        touched_digest=_touched_digest(decode_sites(codes, tab.width, model.d), final),
        touched_sites=int(n_sites),
        words=words if record_words else None,
    )


def run_quenched_batch(model, n: int, walkers: int, environments: int, env_seed: int,
                       walker_seed: int, threads=None) -> list:
    """Independent environments ``0..environments-1``; run in a thread pool.

    Environment ``e`` is identical to ``run_quenched(..., env_index=e)``.
    """
    workers = max(1, min(int(threads or os.cpu_count() or 1), environments))

    def one(e):
        return run_quenched(model, n, walkers, env_seed, walker_seed, env_index=e)

    if workers == 1:
        return [one(e) for e in range(environments)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(environments)))

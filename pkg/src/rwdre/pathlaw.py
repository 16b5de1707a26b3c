"""Exact law of the environment seen from the walker.

The walk is recorded as a sequence of symbols ``(state, jump)``: the state of
the chain at the walker's current site and the jump taken from it. Given the
history, the next symbol ``(a, v)`` has probability

* ``p^k[z, a] * q[a, v]`` if the walker last stood on its current site ``k``
  steps ago, when that site was in state ``z``;
* ``pi[a] * q[a, v]`` if the site was never visited before.

Words are tuples of :class:`Symbol`, oldest first, so the last entry is the
current time. Everything before the first symbol counts as "never visited":
that is the fixed standard past, and with a stationary environment at time 0 it
makes :func:`exact_word_probability` exact.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numba as nb
import numpy as np

from .errors import EnumerationTooLarge, HorizonTooLarge

STANDARD_PAST = "no-prior-visits"
ENUMERATION_GUARD = 10**8
EXTENSION_GUARD = 10**7


class Symbol(NamedTuple):
    state: int
    jump: int


Word = tuple  # tuple[Symbol, ...], most recent last


@dataclass(frozen=True, eq=False)
class SymbolAlphabet:
    """The symbols ``(a, v)`` with ``q[a, v] > 0``, ordered by ``(a, v)``."""

    symbols: tuple
    state: np.ndarray
    jump: np.ndarray
    vectors: np.ndarray
    weight: np.ndarray  # q[a, v] per symbol

    @classmethod
    def from_model(cls, model) -> "SymbolAlphabet":
        pairs = [Symbol(a, v) for a in range(model.n_states) for v in range(model.n_jumps)
                 if model.q[a, v] > 0]
        state = np.array([s.state for s in pairs], dtype=np.int64)
        jump = np.array([s.jump for s in pairs], dtype=np.int64)
        return cls(
            symbols=tuple(pairs),
            state=state,
            jump=jump,
            vectors=np.ascontiguousarray(model.jumps[jump]),
            weight=model.q[state, jump].copy(),
        )

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol) -> int:
        return self.symbols.index(Symbol(*symbol))

    def word(self, indices) -> Word:
        return tuple(self.symbols[i] for i in indices)

    def indices(self, word) -> np.ndarray:
        return np.array([self.index(s) for s in word], dtype=np.int64)

    def decode(self, code: int, length: int) -> Word:
        """Word of ``length`` symbols from its base-``|B|`` code (newest digit last)."""
        nb_ = len(self)
        idx = []
        for _ in range(length):
            code, r = divmod(code, nb_)
            idx.append(r)
        return self.word(idx[::-1])

    def encode(self, word) -> int:
        code = 0
        for s in word:
            code = code * len(self) + self.index(s)
        return code


def last_return(word: Sequence, jumps) -> int | None:
    """Offset ``l <= -1`` of the walker's last visit to its current site.

    Only the symbols before the final one are scanned; ``None`` means no return
    within the word.
    """
    jumps = np.asarray(jumps)
    if len(word) == 0:
        raise ValueError("word must be nonempty")
    total = [0] * jumps.shape[1]
    for back in range(1, len(word)):
        vec = jumps[word[-1 - back][1]]
        for i in range(len(total)):
            total[i] += int(vec[i])
        if not any(total):
            return -back
    return None


def potential(word: Sequence, model) -> float:
    """``log`` of the conditional probability of the last symbol given the rest."""
    a, v = word[-1]
    qv = model.q[a, v]
    if qv <= 0:
        raise ValueError(f"({a}, {v}) is not a symbol: q[{a}, {v}] = 0")
    chain = model.chain
    ell = last_return(word, model.jumps)
    if ell is None:
        return math.log(chain.pi[a] * qv)
    z = word[ell - 1][0]
    return math.log(chain.power(-ell)[z, a] * qv)


def log_word_probability(word: Sequence, model) -> float:
    return sum(potential(word[: m + 1], model) for m in range(len(word)))


def exact_word_probability(word: Sequence, model) -> float:
    """Probability that the first ``len(word)`` symbols of the walk equal ``word``.

    The walk starts at the origin at time 0 in a stationary environment.
    """
    prob = 1.0
    for m in range(len(word)):
        prob *= math.exp(potential(word[: m + 1], model))
    return prob


@nb.njit(cache=True)
def _enumerate(prefix, length, sym_state, sym_vec, sym_weight, powers, pi, prune,
               probs_out, box_out, box_half, box_width):
    """Depth-first walk over all extensions of ``prefix`` to ``length`` symbols.

    Extension probabilities are conditional on the prefix. Writes them to
    ``probs_out`` (indexed by the base-B code of the extension) and/or
    accumulates the final position into ``box_out``. Returns retained mass.
    """
    nsym = sym_state.shape[0]
    d = sym_vec.shape[1]
    m0 = prefix.shape[0]
    kmax = powers.shape[0] - 1
    pos = np.zeros((length + 1, d), dtype=np.int64)
    z = np.zeros(length + 1, dtype=np.int64)
    for t in range(m0):
        b = prefix[t]
        z[t] = sym_state[b]
        for i in range(d):
            pos[t + 1, i] = pos[t, i] + sym_vec[b, i]
    write_probs = probs_out.shape[0] > 0
    write_box = box_out.shape[0] > 0

    mass = 0.0
    if m0 == length:
        if write_probs:
            probs_out[0] = 1.0
        if write_box:
            j = 0
            for i in range(d):
                j = j * box_width + pos[length, i] + box_half
            box_out[j] += 1.0
        return 1.0

    cprob = np.ones(length + 1)
    code = np.zeros(length + 1, dtype=np.int64)
    choice = np.full(length + 1, -1, dtype=np.int64)
    ret_gap = np.zeros(length + 1, dtype=np.int64)
    ret_state = np.zeros(length + 1, dtype=np.int64)
    t = m0
    while True:
        if choice[t] == -1:
            # last return to pos[t], shared by all symbols at this level
            ret_gap[t] = 0
            for s in range(t - 1, -1, -1):
                same = True
                for i in range(d):
                    if pos[s, i] != pos[t, i]:
                        same = False
                        break
                if same:
                    ret_gap[t] = t - s
                    ret_state[t] = z[s]
                    break
        choice[t] += 1
        if choice[t] == nsym:
            choice[t] = -1
            t -= 1
            if t < m0:
                break
            continue
        b = choice[t]
        a = sym_state[b]
        g = ret_gap[t]
        if g == 0:
            f = pi[a]
        elif g <= kmax:
            f = powers[g, ret_state[t], a]
        else:
            f = pi[a]
        pr = cprob[t] * f * sym_weight[b]
        if prune > 0.0 and pr < prune:
            continue
        z[t] = a
        for i in range(d):
            pos[t + 1, i] = pos[t, i] + sym_vec[b, i]
        code[t + 1] = code[t] * nsym + b
        if t == length - 1:
            mass += pr
            if write_probs:
                probs_out[code[t + 1]] = pr
            if write_box:
                j = 0
                for i in range(d):
                    j = j * box_width + pos[length, i] + box_half
                box_out[j] += pr
        else:
            cprob[t + 1] = pr
            t += 1
    return mass


def _kernel_args(model, length):
    alph = model.symbols
    powers = model.chain.power_table(max(length, 1))
    return alph.state, alph.vectors, alph.weight, powers, model.chain.pi


def word_probabilities(model, n: int, prefix: Sequence = ()) -> np.ndarray:
    """Probabilities of every length-``n`` extension of ``prefix``.

    The result is indexed by the base-``|B|`` code of the extension (newest
    symbol least significant) and is conditional on ``prefix``; with an empty
    prefix it is the exact law of the first ``n`` symbols.
    """
    alph = model.symbols
    size = len(alph) ** n
    if size > EXTENSION_GUARD:
        raise HorizonTooLarge(
            f"|B|^{n} = {size} exceeds the extension guard {EXTENSION_GUARD}",
            guard="EXTENSION_GUARD", value=size,
        )
    pre = alph.indices(prefix) if len(prefix) else np.zeros(0, dtype=np.int64)
    out = np.zeros(size)
    _enumerate(pre, len(pre) + n, *_kernel_args(model, len(pre) + n), 0.0,
               out, np.zeros(0), 0, 0)
    return out


@dataclass(frozen=True, eq=False)
class WalkLaw:
    """Distribution of ``S_n`` on the lattice with its first two moments."""

    n: int
    points: np.ndarray  # (k, d) lattice sites with positive mass
    probs: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    exact: bool
    prune: float = 0.0

    @property
    def total_mass(self) -> float:
        return float(self.probs.sum())

    def as_dict(self) -> dict:
        return {tuple(int(c) for c in x): float(pr) for x, pr in zip(self.points, self.probs)}

    def prob(self, site) -> float:
        site = np.atleast_1d(np.asarray(site))
        hit = np.all(self.points == site, axis=1)
        return float(self.probs[hit].sum())

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "exact": self.exact,
            "prune": self.prune,
            "total_mass": self.total_mass,
            "law": {",".join(str(int(c)) for c in x): float(pr)
                    for x, pr in zip(self.points, self.probs)},
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.points.shape[1]
        w.writerow([f"x{i}" for i in range(d)] + ["probability"])
        for x, pr in zip(self.points, self.probs):
            w.writerow([int(c) for c in x] + [repr(float(pr))])
        return buf.getvalue()


def enumerate_walk_law(model, n: int, prune: float = 0.0,
                       guard: int = ENUMERATION_GUARD) -> WalkLaw:
    """Exact distribution of ``S_n`` by summing over every symbol history.

    ``prune > 0`` drops branches whose probability falls below it; the result
    is then flagged as approximate.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    nsym = len(model.symbols)
    visits = nsym**n
    if prune <= 0 and visits > guard:
        raise EnumerationTooLarge(
            f"|B|^n = {nsym}^{n} = {visits} exceeds the guard {guard}",
            guard="ENUMERATION_GUARD", value=visits,
        )
    d = model.d
    reach = int(np.abs(model.jumps).max()) if n else 0
    half = n * reach
    width = 2 * half + 1
    box = np.zeros(width**d)
    _enumerate(np.zeros(0, dtype=np.int64), n, *_kernel_args(model, n), float(prune),
               np.zeros(0), box, half, width)
    nz = np.flatnonzero(box)
    coords = np.array(np.unravel_index(nz, (width,) * d)).T - half
    probs = box[nz]
    # a pruned law is renormalized before taking moments
    w = probs / probs.sum() if prune > 0 else probs
    mean = w @ coords
    centered = coords - mean
    cov = (centered * w[:, None]).T @ centered
    return WalkLaw(n=n, points=coords.astype(np.int64), probs=probs,
                   mean=np.asarray(mean, dtype=float), cov=np.atleast_2d(cov),
                   exact=prune <= 0, prune=float(prune))

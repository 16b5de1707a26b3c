"""Transfer operators on functions of the last ``D`` symbols.

A function of the past is approximated by a table over the ``|B|^D`` words of
length ``D`` (oldest symbol first, encoded base ``|B|`` with the newest symbol
as the least significant digit). The transfer operator averages a function
over the next symbol::

    (L f)(w) = sum_b P_D(b | w) f(last D symbols of w.b)

where ``P_D`` is the one-step law of :mod:`rwdre.pathlaw` that only looks for
returns inside ``w`` and falls back to ``pi`` otherwise. ``L 1 = 1`` holds by
construction and ``L^n f`` converges to the constant ``mu(f)``, where ``mu`` is
the stationary cylinder law of the truncated symbol process.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from . import pathlaw
from .errors import HorizonTooLarge, NoConvergence

TABLE_GUARD = 10**7
DENSE_BASIS_MAX = 1024
N_PROBES = 16
MAX_ITER = 20_000


@dataclass(frozen=True, eq=False)
class TruncatedPastFunction:
    """Real or vector valued function of the last ``depth`` symbols.

    ``values`` has shape ``(n_symbols**depth,)`` or ``(n_symbols**depth, k)``.
    """

    depth: int
    values: np.ndarray
    n_symbols: int

    def __post_init__(self):
        size = self.n_symbols**self.depth
        if self.values.shape[0] != size:
            raise ValueError(f"table has {self.values.shape[0]} rows, expected {size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("table values must be finite")

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == 2

    @classmethod
    def constant(cls, n_symbols, depth, value=1.0):
        return cls(depth, np.full(n_symbols**depth, float(value)), n_symbols)

    @classmethod
    def of_current_symbol(cls, per_symbol, depth=1):
        """Lift a function of the current symbol (one row per symbol) to ``depth``."""
        per_symbol = np.asarray(per_symbol, dtype=float)
        nsym = per_symbol.shape[0]
        return cls(1, per_symbol, nsym).lift(depth)

    @classmethod
    def indicator(cls, alphabet, word, depth=None):
        """Indicator that the last ``len(word)`` symbols equal ``word``."""
        k = len(word)
        vals = np.zeros(len(alphabet) ** k)
        vals[alphabet.encode(word)] = 1.0
        f = cls(k, vals, len(alphabet))
        return f if depth is None else f.lift(depth)

    def lift(self, depth: int) -> "TruncatedPastFunction":
        """Same function viewed as a function of the last ``depth >= self.depth`` symbols."""
        if depth < self.depth:
            raise ValueError("cannot lift to a smaller depth")
        codes = np.arange(self.n_symbols**depth) % (self.n_symbols**self.depth)
        return TruncatedPastFunction(depth, self.values[codes], self.n_symbols)

    def __call__(self, word_code: int):
        return self.values[word_code]


class TransferOperator:
    """Depth-``D`` transfer operator of a model.

    ``kernel[w, b]`` is the probability of appending symbol ``b`` to the
    depth-``D`` past ``w``.
    """

    def __init__(self, model, depth: int):
        if depth < 0:
            raise ValueError("depth must be >= 0")
        alph = model.symbols
        nsym = len(alph)
        size = nsym**depth
        if size > TABLE_GUARD:
            raise HorizonTooLarge(
                f"|B|^D = {nsym}^{depth} = {size} exceeds the table guard {TABLE_GUARD}",
                guard="TABLE_GUARD", value=size,
            )
        self.model = model
        self.depth = depth
        self.n_symbols = nsym
        self.size = size
        self.kernel = self._build_kernel(model, depth)

    @staticmethod
    def _build_kernel(model, depth):
        alph = model.symbols
        chain = model.chain
        nsym = len(alph)
        size = nsym**depth
        codes = np.arange(size, dtype=np.int64)
        disp = np.zeros((size, model.d), dtype=np.int64)
        gap = np.zeros(size, dtype=np.int64)
        zstate = np.zeros(size, dtype=np.int64)
        for back in range(1, depth + 1):
            digit = (codes // nsym ** (back - 1)) % nsym
            disp += alph.vectors[digit]
            hit = (gap == 0) & ~disp.any(axis=1)
            gap[hit] = back
            zstate[hit] = alph.state[digit[hit]]
        powers = chain.power_table(max(depth, 1))
        returned = gap > 0
        kern = np.empty((size, nsym))
        kern[:] = chain.pi[alph.state] * alph.weight
        kern[returned] = powers[gap[returned]][:, :, alph.state][
            np.arange(returned.sum()), zstate[returned]
        ] * alph.weight
        return kern

    def apply(self, f):
        """``L f``; accepts a :class:`TruncatedPastFunction` or a raw table."""
        wrap = isinstance(f, TruncatedPastFunction)
        vals = f.values if wrap else np.asarray(f, dtype=float)
        out = self._apply_values(vals)
        return TruncatedPastFunction(self.depth, out, self.n_symbols) if wrap else out

    def _apply_values(self, vals):
        if self.depth == 0:
            return vals * self.kernel[0].sum()
        flat = np.ascontiguousarray(vals.reshape(self.size, -1))
        out = _apply_kernel(self.kernel, flat)
        return out.reshape(vals.shape)

    def adjoint(self, mu):
        """Push a probability vector over depth-``D`` words one step forward."""
        if self.depth == 0:
            return np.array(mu, dtype=float)
        return _adjoint_kernel(self.kernel, np.ascontiguousarray(mu, dtype=float))


@nb.njit(cache=True)
def _apply_kernel(kern, vals):
    # word w = o*rest + r goes to r*B + b when symbol b is appended
    size, nsym = kern.shape
    rest = size // nsym
    ncol = vals.shape[1]
    out = np.zeros((size, ncol))
    for w in range(size):
        base = (w % rest) * nsym
        for b in range(nsym):
            kb = kern[w, b]
            row = base + b
            for c in range(ncol):
                out[w, c] += kb * vals[row, c]
    return out


@nb.njit(cache=True)
def _column_stats(vals, target):
    """Per-column sup distance to ``target`` and the largest column oscillation."""
    size, ncol = vals.shape
    lo = vals[0].copy()
    hi = vals[0].copy()
    dist = np.abs(vals[0] - target)
    for w in range(1, size):
        for c in range(ncol):
            x = vals[w, c]
            if x < lo[c]:
                lo[c] = x
            elif x > hi[c]:
                hi[c] = x
            e = abs(x - target[c])
            if e > dist[c]:
                dist[c] = e
    return dist, np.max(hi - lo)


@nb.njit(cache=True)
def _adjoint_kernel(kern, mu):
    size, nsym = kern.shape
    rest = size // nsym
    out = np.zeros(size)
    for w in range(size):
        base = (w % rest) * nsym
        m = mu[w]
        for b in range(nsym):
            out[base + b] += m * kern[w, b]
    return out


def apply_operator(f: TruncatedPastFunction, model) -> TruncatedPastFunction:
    return TransferOperator(model, f.depth).apply(f)


@dataclass(eq=False)
class RPFAnalysis:
    """Fixed point of the transfer operator at one truncation depth.

    ``mu_minus[w]`` is the probability of the depth-``D`` cylinder ``w``.
    ``gamma_hat`` is the observed contraction rate of ``L^n f - mu(f)``.
    """

    depth: int
    mu_minus: np.ndarray
    gamma_hat: float
    iterations: int
    residual: float
    tol: float
    operator: TransferOperator = field(repr=False)
    residual_history: np.ndarray = field(repr=False, default=None)

    @property
    def model(self):
        return self.operator.model

    @property
    def n_symbols(self) -> int:
        return self.operator.n_symbols

    def cylinder_probabilities(self, k: int) -> np.ndarray:
        """Law of the last ``k <= depth`` symbols (marginal over the older ones)."""
        if not 0 <= k <= self.depth:
            raise ValueError(f"k must be in [0, {self.depth}]")
        return self.mu_minus.reshape(-1, self.n_symbols**k).sum(axis=0)

    def oldest_marginal(self, k: int) -> np.ndarray:
        """Law of the oldest ``k`` symbols of the depth-``D`` window."""
        return self.mu_minus.reshape(self.n_symbols**k, -1).sum(axis=1)

    def expectation(self, f):
        vals = f.lift(self.depth).values if isinstance(f, TruncatedPastFunction) else f
        return np.tensordot(self.mu_minus, vals, axes=(0, 0))

    def lift(self, f: TruncatedPastFunction) -> TruncatedPastFunction:
        return f.lift(self.depth)

    def digest(self) -> str:
        return hashlib.sha256(np.round(self.mu_minus, 14).tobytes()).hexdigest()[:16]

    def to_json_dict(self, full=False) -> dict:
        out = {
            "depth": self.depth,
            "gamma_hat": self.gamma_hat,
            "iterations": self.iterations,
            "residual": self.residual,
            "tol": self.tol,
            "cylinder_digest": self.digest(),
        }
        if full:
            out["cylinders"] = self.mu_minus.tolist()
        return out


def _probe_basis(size):
    if size <= DENSE_BASIS_MAX:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, N_PROBES).astype(np.int64))


def rpf_fixed_point(model, depth: int, tol: float = 1e-12, max_iter: int = MAX_ITER) -> RPFAnalysis:
    """Iterate ``L`` on depth-``D`` cylinder indicators until they turn constant.

    For ``|B|^D <= 1024`` the whole indicator basis is iterated; above that a
    fixed set of 16 evenly spaced indicators is used as probes. The cylinder
    law is the stationary vector of the adjoint, iterated first and then
    checked against the constants the indicators converge to.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    op = TransferOperator(model, depth)
    size = op.size
    basis = _probe_basis(size)

    mu = np.full(size, 1.0 / size)
    for n_adj in range(max_iter):
        new = op.adjoint(mu)
        change = float(np.abs(new - mu).max())
        mu = new
        if change <= tol * 1e-2:
            break
    else:
        raise NoConvergence("adjoint iteration for the cylinder law did not converge")
    mu /= mu.sum()
    residual = float(np.abs(op.adjoint(mu) - mu).max())

    funcs = np.zeros((size, basis.size))
    funcs[basis, np.arange(basis.size)] = 1.0
    resid = []
    it = 0
    while True:
        dist, spread = _column_stats(funcs, mu[basis])
        resid.append(dist)
        if spread <= tol:
            break
        if it >= max_iter:
            raise NoConvergence(
                f"L^n indicators still vary by {spread:.3g} > tol={tol:g} after {it} "
                f"iterations at depth {depth}"
            )
        funcs = op.apply(funcs)
        it += 1
    resid = np.array(resid)
    mismatch = float(np.abs(mu[basis] - funcs.mean(axis=0)).max())
    if mismatch > 10 * tol + 1e-12:
        raise NoConvergence(f"adjoint fixed point disagrees with L^n limits by {mismatch:.3g}")
    gamma_hat = _contraction_rate(resid)
    return RPFAnalysis(depth=depth, mu_minus=mu, gamma_hat=gamma_hat, iterations=it,
                       residual=residual, tol=tol, operator=op, residual_history=resid)


def _contraction_rate(resid, window=6, floor=1e-13):
    """Median over basis functions of the mean successive-residual ratio.

    Only the last ``window`` ratios above the rounding floor count; an even
    window averages out the period-2 oscillation of nearest-neighbour walks. A basis
    function that hits the floor at once contributes rate 0.
    """
    rates = []
    for col in resid.T:
        ok = np.flatnonzero(col > floor)
        ok = ok[ok + 1 < col.size]
        if ok.size == 0:
            rates.append(0.0)
            continue
        idx = ok[-window:]
        ratios = np.maximum(col[idx + 1], floor) / col[idx]
        rates.append(float(np.exp(np.mean(np.log(ratios)))))
    return float(min(np.median(rates), 1.0))


def contraction_profile(rpf: RPFAnalysis):
    """Per-iteration ``max_f ||L^n f - mu(f)||_inf`` over the probe basis."""
    return rpf.residual_history.max(axis=1)


def lagged_covariance(g: TruncatedPastFunction, j: int, rpf: RPFAnalysis):
    """Stationary covariance of ``g`` now and ``j`` steps later.

    Uses ``E[g(X_0) g(X_j)^T] = mu(gbar (L^j gbar)^T)`` with ``gbar = g - mu(g)``.
    Returns a float for scalar ``g`` and a matrix for vector ``g``.
    """
    if j < 0:
        raise ValueError("lag must be >= 0")
    vals = g.lift(rpf.depth).values
    gbar = vals - rpf.expectation(vals)
    h = gbar
    for _ in range(j):
        h = rpf.operator.apply(h)
    return _cross(gbar, h, rpf.mu_minus)


def _cross(a, b, mu):
    if a.ndim == 1:
        return float(np.dot(mu * a, b))
    return (a * mu[:, None]).T @ b


def lagged_covariances(g: TruncatedPastFunction, rpf: RPFAnalysis, j_max: int):
    """Generator of ``(j, C_j)`` for ``j = 0..j_max`` sharing the operator powers."""
    vals = g.lift(rpf.depth).values
    gbar = vals - rpf.expectation(vals)
    h = gbar
    for j in range(j_max + 1):
        if j:
            h = rpf.operator.apply(h)
        yield j, _cross(gbar, h, rpf.mu_minus)


def conditional_expectation(prefix, f: TruncatedPastFunction, n: int, model) -> float:
    """``E[f(symbols n .. n+k-1) | first symbols = prefix]`` under the exact walk law.

    ``f`` reads ``k = f.depth`` consecutive symbols. The future symbols are
    summed out with their exact conditional probabilities given ``prefix``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    alph = model.symbols
    nsym = len(alph)
    k = f.depth
    m = len(prefix) - 1
    end = n + k - 1
    if end <= m:
        window = prefix[n:n + k]
        return float(f.values[alph.encode(window)]) if k else float(f.values[0])
    ext = end - m
    if nsym**ext > pathlaw.EXTENSION_GUARD:
        raise HorizonTooLarge(
            f"|B|^{ext} = {nsym ** ext} continuations exceed the guard {pathlaw.EXTENSION_GUARD}",
            guard="EXTENSION_GUARD", value=nsym**ext,
        )
    probs = pathlaw.word_probabilities(model, ext, prefix)
    head = alph.encode(prefix[n:]) if n <= m else 0
    codes = (head * nsym**ext + np.arange(nsym**ext)) % (nsym**k)
    return float(np.dot(probs, f.values[codes]))


def one_symbol_conditionals(rpf: RPFAnalysis, k: int) -> np.ndarray:
    """``mu(next symbol | previous k symbols)`` as a ``(|B|^k, |B|)`` table."""
    cyl = rpf.cylinder_probabilities(k + 1).reshape(-1, rpf.n_symbols)
    return cyl / cyl.sum(axis=1, keepdims=True)


def absolute_continuity_ratios(model, rpf: RPFAnalysis, k: int) -> np.ndarray:
    """``P+(w) / mu(w)`` for every word ``w`` of ``k`` symbols starting at time 0."""
    exact = pathlaw.word_probabilities(model, k)
    stat = rpf.cylinder_probabilities(k)
    return exact / stat


def geometric_tail(norm_last: float, gamma: float) -> float:
    if gamma >= 1.0:
        return math.inf
    return norm_last / (1.0 - gamma)

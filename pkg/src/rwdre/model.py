"""Site Markov chain and jump kernel of the walk.

A model is a finite-state chain ``p`` running independently at every site of
``Z^d`` together with a jump kernel ``q``: when the walker sits on a site whose
state is ``a`` it jumps by ``jumps[v]`` with probability ``q[a, v]``.

Model files are JSON objects::

    {
      "d": 1,
      "alphabet": ["A", "B"],
      "p": [[0.7, 0.3], [0.4, 0.6]],
      "jumps": [[1], [-1]],
      "q": [[1.0, 0.0], [0.0, 1.0]]
    }

``p`` is row-stochastic with strictly positive entries, ``jumps`` is a list of
distinct length-``d`` integer vectors and ``q`` is a row-stochastic
``len(alphabet) x len(jumps)`` matrix whose columns follow ``jumps``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from ._fit import log_linear_fit
from .errors import (
    DimensionMismatch,
    DuplicateJump,
    ModelError,
    NoConvergence,
    NonPositiveTransition,
    NonStochasticRow,
)

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-12
# beyond this many steps p(k) is replaced by rows of pi
POWER_CUTOFF_EPS = 1e-15
MAX_POWER_CACHE = 1 << 16
DIRECT_SOLVE_MAX_STATES = 64


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A validated problem instance. Build it with :func:`validate_model`."""

    d: int
    alphabet: tuple
    p: np.ndarray
    jumps: np.ndarray
    q: np.ndarray

    @property
    def n_states(self) -> int:
        return len(self.alphabet)

    @property
    def n_jumps(self) -> int:
        return self.jumps.shape[0]

    @cached_property
    def chain(self) -> "ChainAnalysis":
        return ChainAnalysis.from_matrix(self.p)

    @cached_property
    def symbols(self):
        from .pathlaw import SymbolAlphabet

        return SymbolAlphabet.from_model(self)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "alphabet": list(self.alphabet),
            "p": self.p.tolist(),
            "jumps": self.jumps.tolist(),
            "q": self.q.tolist(),
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def scaled(self, factor: int) -> "ModelSpec":
        """Same model with every jump vector multiplied by ``factor``."""
        return validate_model({**self.to_dict(), "jumps": (self.jumps * factor).tolist()})

    def relabeled(self, state_perm=None, jump_perm=None) -> "ModelSpec":
        """Same walk with alphabet states and/or jump vectors reordered."""
        sp = np.arange(self.n_states) if state_perm is None else np.asarray(state_perm)
        jp = np.arange(self.n_jumps) if jump_perm is None else np.asarray(jump_perm)
        return validate_model(
            {
                "d": self.d,
                "alphabet": [self.alphabet[i] for i in sp],
                "p": self.p[np.ix_(sp, sp)].tolist(),
                "jumps": self.jumps[jp].tolist(),
                "q": self.q[np.ix_(sp, jp)].tolist(),
            }
        )


def _matrix(raw, name, rows=None, cols=None):
    try:
        arr = np.array(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"not a numeric matrix ({exc})", path=name) from None
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d array, got ndim={arr.ndim}", path=name)
    if rows is not None and arr.shape[0] != rows:
        raise DimensionMismatch(f"expected {rows} rows, got {arr.shape[0]}", path=name)
    if cols is not None and arr.shape[1] != cols:
        raise DimensionMismatch(f"expected {cols} columns, got {arr.shape[1]}", path=name)
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        i, j = bad[0]
        raise ModelError("non-finite entry", path=f"{name}[{i}][{j}]")
    return arr


def _check_rows(arr, name):
    sums = arr.sum(axis=1)
    for i, s in enumerate(sums):
        if abs(s - 1.0) > ROW_SUM_TOL:
            raise NonStochasticRow(f"row sums to {s!r}, not 1", path=f"{name}[{i}]")


def validate_model(raw) -> ModelSpec:
    """Build a :class:`ModelSpec` from a JSON-like mapping, checking every invariant."""
    if isinstance(raw, ModelSpec):
        raw = raw.to_dict()
    if not isinstance(raw, dict):
        raise ModelError("model description must be a JSON object")
    for key in ("p", "jumps", "q"):
        if key not in raw:
            raise ModelError("missing field", path=key)

    p = _matrix(raw["p"], "p")
    n_states = p.shape[0]
    if p.shape[1] != n_states or n_states < 1:
        raise DimensionMismatch(f"p must be square and nonempty, got {p.shape}", path="p")
    neg = np.argwhere(p <= 0)
    if neg.size:
        i, j = neg[0]
        raise NonPositiveTransition(f"entry {p[i, j]!r} is not > 0", path=f"p[{i}][{j}]")
    _check_rows(p, "p")

    alphabet = raw.get("alphabet")
    if alphabet is None:
        alphabet = [str(i) for i in range(n_states)]
    if len(alphabet) != n_states:
        raise DimensionMismatch(
            f"alphabet has {len(alphabet)} labels but p has {n_states} states", path="alphabet"
        )
    alphabet = tuple(str(a) for a in alphabet)
    if len(set(alphabet)) != n_states:
        raise ModelError("alphabet labels must be distinct", path="alphabet")

    jumps_raw = raw["jumps"]
    if not isinstance(jumps_raw, (list, tuple, np.ndarray)) or len(jumps_raw) < 1:
        raise ModelError("need at least one jump vector", path="jumps")
    d = raw.get("d")
    if d is None:
        first = jumps_raw[0]
        d = len(first) if isinstance(first, (list, tuple, np.ndarray)) else 1
    if isinstance(d, bool) or not isinstance(d, (int, np.integer)) or d < 1:
        raise ModelError(f"d must be a positive integer, got {d!r}", path="d")
    d = int(d)
    jumps = []
    for i, v in enumerate(jumps_raw):
        if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
            v = [v]
        if not isinstance(v, (list, tuple, np.ndarray)):
            raise ModelError("jump must be an integer vector", path=f"jumps[{i}]")
        if len(v) != d:
            raise DimensionMismatch(f"jump has length {len(v)}, expected d={d}", path=f"jumps[{i}]")
        for j, c in enumerate(v):
            if isinstance(c, bool) or not float(c).is_integer():
                raise ModelError(f"coordinate {c!r} is not an integer", path=f"jumps[{i}][{j}]")
        jumps.append([int(c) for c in v])
    seen = {}
    for i, v in enumerate(jumps):
        key = tuple(v)
        if key in seen:
            raise DuplicateJump(f"repeats jumps[{seen[key]}] = {list(key)}", path=f"jumps[{i}]")
        seen[key] = i
    jumps = np.array(jumps, dtype=np.int64).reshape(len(jumps), d)

    q = _matrix(raw["q"], "q", rows=n_states, cols=len(jumps))
    neg = np.argwhere(q < 0)
    if neg.size:
        i, j = neg[0]
        raise NonStochasticRow(f"negative entry {q[i, j]!r}", path=f"q[{i}][{j}]")
    _check_rows(q, "q")

    p.setflags(write=False)
    q.setflags(write=False)
    jumps.setflags(write=False)
    return ModelSpec(d=d, alphabet=alphabet, p=p, jumps=jumps, q=q)


def load_model(path) -> ModelSpec:
    """Read and validate a model JSON file."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON: {exc}") from None
    return validate_model(raw)


def builtin_model(name: str) -> ModelSpec:
    """Load one of the bundled models (``two_state``, ``iid``, ``line2d``, ...)."""
    ref = resources.files("rwdre.models").joinpath(f"{name}.json")
    return validate_model(json.loads(ref.read_text()))


def builtin_model_names():
    return sorted(
        f.name[:-5] for f in resources.files("rwdre.models").iterdir() if f.name.endswith(".json")
    )


def stationary_distribution(p, max_iter=100_000) -> np.ndarray:
    """Stationary row vector ``pi`` with ``pi @ p == pi``.

    Small chains are solved directly; larger ones use power iteration on ``p.T``.
    """
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    if n == 1:
        return np.ones(1)
    if n <= DIRECT_SOLVE_MAX_STATES:
        a = p.T - np.eye(n)
        a[-1, :] = 1.0
        rhs = np.zeros(n)
        rhs[-1] = 1.0
        pi = np.linalg.solve(a, rhs)
    else:
        pi = np.full(n, 1.0 / n)
        for _ in range(max_iter):
            new = pi @ p
            new /= new.sum()
            if np.max(np.abs(new - pi)) <= STATIONARY_TOL:
                pi = new
                break
            pi = new
        else:
            raise NoConvergence(f"power iteration for pi did not converge in {max_iter} steps")
    # one fixed-point polish step
    pi = pi @ p
    pi /= pi.sum()
    resid = np.max(np.abs(pi @ p - pi))
    if resid > 1e-10 or np.any(pi <= 0):
        raise NoConvergence(f"stationary residual {resid:.3g} too large")
    return pi


def second_eigenvalue_modulus(p) -> float:
    p = np.asarray(p, dtype=float)
    if p.shape[0] == 1:
        return 0.0
    mods = np.sort(np.abs(np.linalg.eigvals(p)))[::-1]
    return float(min(mods[1], 1.0))


def _cutoff(lam: float) -> int:
    if lam <= 0.0:
        return 1
    k = math.ceil(math.log(POWER_CUTOFF_EPS) / math.log(lam))
    return max(1, k)


@dataclass(frozen=True, eq=False)
class ChainAnalysis:
    """Stationary law, second eigenvalue and cached powers of a site chain.

    ``powers[k]`` holds ``p^k`` for ``k = 0..cutoff``. The table is filled at
    construction and never mutated, so instances can be shared freely between
    threads. For ``k > cutoff`` the rows of ``p^k`` agree with ``pi`` to
    ~1e-15 and :meth:`power` returns ``pi`` rows instead.
    """

    p: np.ndarray
    pi: np.ndarray
    lam: float
    cutoff: int
    powers: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, p) -> "ChainAnalysis":
        p = np.asarray(p, dtype=float)
        pi = stationary_distribution(p)
        lam = second_eigenvalue_modulus(p)
        cutoff = min(_cutoff(lam), MAX_POWER_CACHE)
        n = p.shape[0]
        powers = np.empty((cutoff + 1, n, n))
        powers[0] = np.eye(n)
        for k in range(1, cutoff + 1):
            powers[k] = powers[k - 1] @ p
        powers.setflags(write=False)
        return cls(p=p, pi=pi, lam=lam, cutoff=cutoff, powers=powers)

    @property
    def n_states(self) -> int:
        return self.p.shape[0]

    @property
    def k_max(self) -> int:
        return self.cutoff

    def power(self, k: int) -> np.ndarray:
        if k < 0:
            raise ValueError("k must be >= 0")
        if k <= self.cutoff:
            return self.powers[k]
        if self.cutoff == MAX_POWER_CACHE:
            # slowly mixing chain: cutoff was capped, compute exactly
            return self.powers[self.cutoff] @ np.linalg.matrix_power(self.p, k - self.cutoff)
        return np.broadcast_to(self.pi, self.p.shape)

    def power_table(self, k_max: int) -> np.ndarray:
        """``p^k`` for ``k = 0..k_max`` as one array (rows of ``pi`` past the cutoff)."""
        out = np.empty((k_max + 1, self.n_states, self.n_states))
        m = min(k_max, self.cutoff)
        out[: m + 1] = self.powers[: m + 1]
        for k in range(m + 1, k_max + 1):
            out[k] = self.power(k)
        return out

    def mixing_profile(self, k_max: int = 20):
        """``max_{a,b} |p^k_ab - pi_b|`` for ``k = 1..k_max``."""
        ks = np.arange(1, k_max + 1)
        errs = np.array([np.max(np.abs(self.power(k) - self.pi)) for k in ks])
        return ks, errs

    def fit_mixing_rate(self, k_max: int = 20):
        """Fit ``err_k ~ C rate^k``; returns ``(rate, C)``.

        Errors at the double-precision floor are excluded from the fit.
        """
        ks, errs = self.mixing_profile(k_max)
        rate, c, _ = log_linear_fit(ks, errs, floor=1e-14)
        return rate, c


@lru_cache(maxsize=64)
def _analysis_for(key, shape):
    p = np.frombuffer(key, dtype=float).reshape(shape)
    return ChainAnalysis.from_matrix(p)


def k_step(p, k: int) -> np.ndarray:
    """``k``-step transition matrix ``p^k`` (memoized per matrix)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    p = np.ascontiguousarray(p, dtype=float)
    return _analysis_for(p.tobytes(), p.shape).power(k)

"""Statistical verdicts on simulated walks and the mixing-rate regression."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import transfer
from ._fit import log_linear_fit
from .errors import DegenerateDirection, InsufficientEnvironments, NoDecayDetected

DEFAULT_ALPHA = 0.01
COV_TOL = 0.05
N_RANDOM_DIRECTIONS = 5
DIRECTION_SEED = 0
MIN_REPLICAS = 10**4
MIN_ENVIRONMENTS = 30
MIN_WALKERS = 10**3
UNIFORMITY_ALPHA = 0.01
DEGENERATE_REL = 1e-8
MIN_CONTINUATIONS = 10**5
JITTER_SEED = 0
MIXING_DEPTH = 12
MIXING_TABLE_BUDGET = 2**20


def default_directions(d: int, seed: int = DIRECTION_SEED, n_random: int = N_RANDOM_DIRECTIONS):
    """Canonical axes, plus ``n_random`` fixed random unit vectors when ``d > 1``."""
    dirs = list(np.eye(d))
    if d > 1 and n_random:
        g = np.random.default_rng(seed).standard_normal((n_random, d))
        dirs.extend(g / np.linalg.norm(g, axis=1, keepdims=True))
    return np.array(dirs)


def _positions(samples, n):
    pos = getattr(samples, "positions", samples)
    n = getattr(samples, "n", n)
    if n is None:
        raise ValueError("n is required when samples is a plain array")
    pos = np.asarray(pos, dtype=float)
    return (pos[:, None] if pos.ndim == 1 else pos), int(n)


def _check_directions(dirs, diffusion):
    scale = float(np.linalg.norm(diffusion))
    s2 = np.einsum("ki,ij,kj->k", dirs, diffusion, dirs)
    for w, s in zip(dirs, s2):
        if s <= DEGENERATE_REL * scale or s <= 0:
            raise DegenerateDirection(
                f"w^T V w = {s:.3g} along w={np.round(w, 6).tolist()} is degenerate; "
                "use the degeneracy certificate instead")
    return s2


def _fgcd(a, b, tol):
    while b > tol:
        a, b = b, a % b
        if b > a - tol:
            b = 0.0
    return a


def lattice_span(support, w, tol=1e-9) -> float:
    """Spacing of the lattice that ``<S_n, w>`` lives on, or 0 if it has none.

    ``S_n`` lies in ``n v_0 + L`` with ``L`` generated by the differences of
    the supported jumps, so the projection is confined to a grid of step
    ``gcd(<v - v_0, w>)`` whenever those numbers are commensurate.
    """
    vals = np.asarray(support, dtype=float) @ np.asarray(w, dtype=float)
    diffs = np.abs(vals - vals[0])
    g = 0.0
    for x in diffs:
        if x > tol:
            g = x if g == 0.0 else _fgcd(max(g, x), min(g, x), tol)
    return g if g > 1e3 * tol else 0.0


def _spans(report, dirs, support):
    if support is None:
        cert = getattr(report, "certificate", None)
        support = None if cert is None else cert.support
    if support is None:
        return np.zeros(dirs.shape[0])
    return np.array([lattice_span(support, w) for w in dirs])


def _jitter(proj, spans, seed):
    # spread each lattice atom uniformly over its cell before a continuous test
    if not np.any(spans):
        return proj
    u = np.random.default_rng(seed).uniform(-0.5, 0.5, size=proj.shape)
    return proj + u * spans


def _ks(z):
    r = sps.kstest(z, "norm")
    return float(r.statistic), float(r.pvalue)


@dataclass(eq=False)
class CLTVerdict:
    n: int
    replicas: int
    alpha: float
    directions: np.ndarray
    ks_statistics: np.ndarray
    p_values: np.ndarray
    z_mean: np.ndarray
    z_var: np.ndarray
    empirical_drift: np.ndarray
    drift_se: np.ndarray
    empirical_covariance: np.ndarray  # Var(S_n) / n
    drift: np.ndarray
    diffusion: np.ndarray
    covariance_rel_error: float
    cov_tol: float
    spans: np.ndarray = None
    criteria: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.criteria.values())

    @property
    def drift_z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.drift_se > 0,
                            (self.empirical_drift - self.drift) / self.drift_se, 0.0)

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "replicas": self.replicas,
            "alpha": self.alpha,
            "bonferroni_level": self.alpha / len(self.directions),
            "directions": [
                {"w": w.tolist(), "ks": float(k), "p_value": float(p),
                 "z_mean": float(m), "z_var": float(v), "lattice_span": float(sp)}
                for w, k, p, m, v, sp in zip(self.directions, self.ks_statistics, self.p_values,
                                             self.z_mean, self.z_var, self.spans)
            ],
            "empirical_drift": self.empirical_drift.tolist(),
            "drift_se": self.drift_se.tolist(),
            "drift_z": self.drift_z.tolist(),
            "empirical_covariance": self.empirical_covariance.tolist(),
            "drift": self.drift.tolist(),
            "diffusion": self.diffusion.tolist(),
            "covariance_rel_error": self.covariance_rel_error,
            "cov_tol": self.cov_tol,
            "criteria": dict(self.criteria),
            "passed": self.passed,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.directions.shape[1]
        w.writerow([f"w{i}" for i in range(d)] + ["ks", "p_value", "z_mean", "z_var"])
        for row, k, p, m, v in zip(self.directions, self.ks_statistics, self.p_values,
                                   self.z_mean, self.z_var):
            w.writerow([repr(float(x)) for x in row] + [repr(float(k)), repr(float(p)),
                                                         repr(float(m)), repr(float(v))])
        return buf.getvalue()


def test_annealed_clt(samples, report, directions=None, n=None, alpha=DEFAULT_ALPHA,
                      cov_tol=COV_TOL, min_replicas=MIN_REPLICAS, continuity=True,
                      jitter_seed=JITTER_SEED, support=None) -> CLTVerdict:
    """KS test of ``<S_n - n v, w> / sqrt(n w^T V w)`` against N(0, 1) per direction.

    ``samples`` is a run object with ``positions`` and ``n`` or an ``(R, d)``
    array together with ``n``. Passes when every p-value clears the Bonferroni
    level ``alpha / #directions``, the empirical ``Var(S_n)/n`` is within
    ``cov_tol`` of ``V`` in relative Frobenius norm, and the empirical drift is
    within 3 standard errors of ``v`` in every coordinate.

    With ``continuity`` on, projections that live on a grid (see
    :func:`lattice_span`) get a seeded uniform jitter of one grid cell before
    the KS test, so that lattice atoms of size ``O(1/sqrt(n))`` are not
    mistaken for non-normality. ``support`` defaults to the jump support in
    ``report.certificate``.
    """
    pos, n = _positions(samples, n)
    reps, d = pos.shape
    if reps < min_replicas:
        raise ValueError(f"need at least {min_replicas} replicas, got {reps}")
    drift = np.atleast_1d(np.asarray(report.drift, dtype=float))
    diffusion = np.atleast_2d(np.asarray(report.diffusion, dtype=float))
    dirs = default_directions(d) if directions is None else np.atleast_2d(
        np.asarray(directions, dtype=float))
    s2 = _check_directions(dirs, diffusion)

    spans = _spans(report, dirs, support) if continuity else np.zeros(dirs.shape[0])
    centered = pos - n * drift
    proj = _jitter(centered @ dirs.T, spans, jitter_seed) / np.sqrt(n * s2)
    ks = np.array([_ks(proj[:, i]) for i in range(dirs.shape[0])])
    emp_cov = np.atleast_2d(np.cov(pos, rowvar=False)) / n
    emp_drift = pos.mean(axis=0) / n
    drift_se = np.sqrt(np.diag(emp_cov) * n / reps) / n
    rel = float(np.linalg.norm(emp_cov - diffusion) / np.linalg.norm(diffusion))
    level = alpha / dirs.shape[0]
    criteria = {
        "ks": bool(np.all(ks[:, 1] >= level)),
        "covariance": rel <= cov_tol,
        "drift": bool(np.all(np.abs(emp_drift - drift) <= 3 * drift_se + 1e-15)),
    }
    return CLTVerdict(
        n=n, replicas=reps, alpha=alpha, directions=dirs,
        ks_statistics=ks[:, 0], p_values=ks[:, 1],
        z_mean=proj.mean(axis=0), z_var=proj.var(axis=0), spans=spans,
        empirical_drift=emp_drift, drift_se=drift_se, empirical_covariance=emp_cov,
        drift=drift, diffusion=diffusion, covariance_rel_error=rel, cov_tol=cov_tol,
        criteria=criteria,
    )


test_annealed_clt.__test__ = False


@dataclass(eq=False)
class QuenchedVerdict:
    n: int
    environments: int
    walkers: list
    alpha: float
    directions: np.ndarray
    p_values: np.ndarray  # (E, #directions)
    environment_p: np.ndarray  # Bonferroni-adjusted per environment
    z_mean: np.ndarray  # (E, #directions)
    z_var: np.ndarray
    rejection_fraction: float
    band: float
    uniformity_p: float
    pooled_covariance: np.ndarray
    pooled_rel_error: float
    criteria: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.criteria.values())

    @property
    def rejections(self) -> int:
        return int(np.sum(self.environment_p < self.alpha))

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "environments": self.environments,
            "walkers": self.walkers,
            "alpha": self.alpha,
            "directions": self.directions.tolist(),
            "rejections": self.rejections,
            "rejection_fraction": self.rejection_fraction,
            "band": self.band,
            "uniformity_p": self.uniformity_p,
            "environment_p": self.environment_p.tolist(),
            "z_mean": self.z_mean.tolist(),
            "z_var": self.z_var.tolist(),
            "pooled_covariance": self.pooled_covariance.tolist(),
            "pooled_rel_error": self.pooled_rel_error,
            "criteria": dict(self.criteria),
            "passed": self.passed,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.directions.shape[0]
        w.writerow(["environment", "p_adjusted"] + [f"p{i}" for i in range(k)]
                   + [f"z_mean{i}" for i in range(k)] + [f"z_var{i}" for i in range(k)])
        for e in range(self.environments):
            w.writerow([e, repr(float(self.environment_p[e]))]
                       + [repr(float(x)) for x in self.p_values[e]]
                       + [repr(float(x)) for x in self.z_mean[e]]
                       + [repr(float(x)) for x in self.z_var[e]])
        return buf.getvalue()


def test_quenched_clt(runs, report, directions=None, n=None, alpha=DEFAULT_ALPHA,
                      min_environments=MIN_ENVIRONMENTS, min_walkers=MIN_WALKERS,
                      uniformity_alpha=UNIFORMITY_ALPHA, continuity=True,
                      jitter_seed=JITTER_SEED, support=None) -> QuenchedVerdict:
    """Per-environment KS tests centred at ``n v``, aggregated over environments.

    Each environment gets one Bonferroni-adjusted p-value over the directions.
    Passes when the fraction of environments rejected at ``alpha`` lies within
    ``3 sqrt(alpha (1 - alpha) / E)`` of ``alpha`` and a KS test of those
    p-values against Uniform(0, 1) has p-value at least ``uniformity_alpha``.
    Lattice jitter works as in :func:`test_annealed_clt`, with seed
    ``jitter_seed + e`` in environment ``e``.
    """
    runs = list(runs)
    if len(runs) < min_environments:
        raise InsufficientEnvironments(
            f"{len(runs)} environments given, at least {min_environments} required")
    samples = [_positions(r, n) for r in runs]
    ns = {s[1] for s in samples}
    if len(ns) != 1:
        raise ValueError("all environments must share the same n")
    n = ns.pop()
    d = samples[0][0].shape[1]
    for pos, _ in samples:
        if pos.shape[0] < min_walkers:
            raise ValueError(f"need at least {min_walkers} walkers per environment")
    drift = np.atleast_1d(np.asarray(report.drift, dtype=float))
    diffusion = np.atleast_2d(np.asarray(report.diffusion, dtype=float))
    dirs = np.eye(d) if directions is None else np.atleast_2d(np.asarray(directions, float))
    s2 = _check_directions(dirs, diffusion)

    spans = _spans(report, dirs, support) if continuity else np.zeros(dirs.shape[0])
    k = dirs.shape[0]
    p = np.empty((len(samples), k))
    zm = np.empty_like(p)
    zv = np.empty_like(p)
    for e, (pos, _) in enumerate(samples):
        proj = _jitter((pos - n * drift) @ dirs.T, spans, jitter_seed + e) / np.sqrt(n * s2)
        for i in range(k):
            p[e, i] = _ks(proj[:, i])[1]
        zm[e] = proj.mean(axis=0)
        zv[e] = proj.var(axis=0)
    env_p = np.minimum(1.0, k * p.min(axis=1))
    frac = float(np.mean(env_p < alpha))
    band = 3 * math.sqrt(alpha * (1 - alpha) / len(samples))
    unif = float(sps.kstest(env_p, "uniform").pvalue)
    allpos = np.concatenate([pos for pos, _ in samples])
    pooled = np.atleast_2d(np.cov(allpos, rowvar=False)) / n
    pooled_rel = float(np.linalg.norm(pooled - diffusion) / np.linalg.norm(diffusion))
    criteria = {
        "rejection_fraction": abs(frac - alpha) <= band,
        "uniformity": unif >= uniformity_alpha,
    }
    return QuenchedVerdict(
        n=n, environments=len(samples), walkers=[int(s[0].shape[0]) for s in samples],
        alpha=alpha, directions=dirs, p_values=p, environment_p=env_p, z_mean=zm, z_var=zv,
        rejection_fraction=frac, band=band, uniformity_p=unif,
        pooled_covariance=pooled, pooled_rel_error=pooled_rel, criteria=criteria,
    )


test_quenched_clt.__test__ = False


def ks_calibration(sample_size: int = 10**5, trials: int = 100, alpha: float = DEFAULT_ALPHA,
                   seed: int = 0) -> dict:
    """Rejection rate of the normality KS test on genuine N(0, 1) samples.

    The rate should fall within three binomial standard errors of ``alpha``.
    """
    rng = np.random.default_rng(seed)
    pvals = np.array([_ks(rng.standard_normal(sample_size))[1] for _ in range(trials)])
    rate = float(np.mean(pvals < alpha))
    band = 3 * math.sqrt(alpha * (1 - alpha) / trials)
    return {"trials": trials, "sample_size": sample_size, "alpha": alpha,
            "rejection_rate": rate, "band": band, "passed": abs(rate - alpha) <= band,
            "p_values": pvals}


@dataclass(eq=False)
class MixingFit:
    gaps: np.ndarray
    errors: np.ndarray
    mu_f: float
    slope: float
    intercept: float
    gamma_emp: float
    c_k: float
    floor: float
    fitted: np.ndarray  # mask of gaps used in the fit
    knee: int
    mode: str
    lam: float
    gamma_hat: float

    def monotone_beyond(self, gap: int, band: float | None = None) -> bool:
        """Errors never increase past ``gap`` by more than the noise band."""
        band = self.floor if band is None else band
        e = self.errors[self.gaps >= gap]
        return bool(np.all(np.diff(e) <= band))

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "gaps": self.gaps.tolist(),
            "errors": self.errors.tolist(),
            "mu_f": self.mu_f,
            "slope": self.slope,
            "intercept": self.intercept,
            "gamma_emp": self.gamma_emp,
            "C_k": self.c_k,
            "floor": self.floor,
            "fitted_gaps": self.gaps[self.fitted].tolist(),
            "knee": self.knee,
            "lambda": self.lam,
            "gamma_hat": self.gamma_hat,
        }

    def to_csv(self) -> str:
        rows = ["gap,error"] + [f"{int(g)},{float(e)!r}" for g, e in zip(self.gaps, self.errors)]
        return "\n".join(rows) + "\n"


def _knee(errors, band):
    # first index after which the errors never rise by more than band
    k = len(errors) - 1
    while k > 0 and errors[k] - errors[k - 1] <= band:
        k -= 1
    return k


def all_prefixes(model, length: int):
    """Every word of ``length`` symbols with positive probability."""
    alph = model.symbols
    from .pathlaw import word_probabilities
    probs = word_probabilities(model, length)
    return [alph.decode(c, length) for c in np.flatnonzero(probs > 0)]


def fit_mixing_rate(model, f, m: int, gaps, prefixes=None, mode: str = "exact", rpf=None,
                    continuations: int = MIN_CONTINUATIONS, seed: int = 0,
                    fit_factor: float = 10.0) -> MixingFit:
    """Decay of ``max_prefix |E[f o tau^(m+g) | first m+1 symbols] - mu(f)|`` in the gap ``g``.

    ``f`` is a :class:`TruncatedPastFunction` of depth ``k <= 2``. In
    ``"exact"`` mode the conditional expectations are summed over all
    continuations; in ``"mc"`` mode they are averaged over ``continuations``
    simulated walks per prefix. ``mu(f)`` comes from ``rpf`` (a deep fixed
    point by default). The fit uses gaps whose error exceeds ``fit_factor``
    times the noise floor; fewer than two such gaps raises
    :class:`NoDecayDetected`.
    """
    from . import sim

    if f.depth > 2:
        raise ValueError("f must depend on at most 2 symbols")
    if mode not in ("exact", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    gaps = np.asarray(sorted(set(int(g) for g in gaps)), dtype=np.int64)
    if gaps.size == 0 or gaps[0] < 1:
        raise ValueError("gaps must be positive")
    if prefixes is None:
        prefixes = all_prefixes(model, m + 1)
    if rpf is None:
        nsym = len(model.symbols)
        depth = MIXING_DEPTH
        while depth > f.depth + 2 and nsym**depth > MIXING_TABLE_BUDGET:
            depth -= 1
        rpf = transfer.rpf_fixed_point(model, depth)
    mu_f = float(rpf.expectation(f))
    shallow = transfer.rpf_fixed_point(model, max(rpf.depth - 2, f.depth))
    bias = abs(float(shallow.expectation(f)) - mu_f)

    errors = np.zeros(gaps.size)
    if mode == "exact":
        floor = max(1e-13, 10 * bias)
        for pre in prefixes:
            for i, g in enumerate(gaps):
                val = transfer.conditional_expectation(pre, f, m + g, model)
                errors[i] = max(errors[i], abs(val - mu_f))
    else:
        if continuations < MIN_CONTINUATIONS:
            raise ValueError(f"need at least {MIN_CONTINUATIONS} continuations per prefix")
        length = m + int(gaps[-1]) + f.depth
        nsym = f.n_symbols
        se_max = 0.0
        for j, pre in enumerate(prefixes):
            run = sim.run_annealed(model, length, continuations, seed + j, record_words=True,
                                   prefix=pre)
            w = run.words.astype(np.int64)
            for i, g in enumerate(gaps):
                start = m + g
                code = np.zeros(w.shape[0], dtype=np.int64)
                for t in range(start, start + f.depth):
                    code = code * nsym + w[:, t]
                vals = f.values[code]
                errors[i] = max(errors[i], abs(float(vals.mean()) - mu_f))
                se_max = max(se_max, float(vals.std()) / math.sqrt(vals.size))
        floor = max(1e-13, 10 * bias, 3 * se_max)

    fitted = errors > fit_factor * floor
    if fitted.sum() < 2:
        raise NoDecayDetected(
            f"errors stay below {fit_factor:g} x noise floor {floor:.3g}; no rate to fit",
            floor=floor, errors=errors)
    # fit over the decaying tail: from the knee onward
    knee_idx = _knee(errors, floor)
    use = fitted & (np.arange(gaps.size) >= min(knee_idx, np.flatnonzero(fitted)[-2]))
    rate, c, _ = log_linear_fit(gaps[use].astype(float), errors[use])
    fmax = float(np.max(np.abs(f.values))) or 1.0
    return MixingFit(
        gaps=gaps, errors=errors, mu_f=mu_f, slope=math.log(rate), intercept=math.log(c),
        gamma_emp=rate, c_k=c / fmax, floor=floor, fitted=use, knee=int(gaps[knee_idx]),
        mode=mode, lam=float(model.chain.lam), gamma_hat=float(rpf.gamma_hat),
    )


def state_indicator(model, state: int = 0) -> transfer.TruncatedPastFunction:
    """Indicator that the current symbol carries ``state``."""
    alph = model.symbols
    return transfer.TruncatedPastFunction.of_current_symbol((alph.state == state).astype(float))



def jump_indicator(model, jump: int = 0) -> transfer.TruncatedPastFunction:
    """Indicator that the current symbol's jump has index ``jump``."""
    alph = model.symbols
    return transfer.TruncatedPastFunction.of_current_symbol((alph.jump == jump).astype(float))

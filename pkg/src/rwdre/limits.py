"""Drift, diffusion matrix and degeneracy of the walk."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import transfer
from .errors import EmptySupport, HorizonTooLarge, TailNotSmall

DEFAULT_JMAX = 200
DEFAULT_GK_TOL = 1e-10
DEFAULT_DEPTH_TOL = 1e-6
AUTO_DEPTH_START = 4
AUTO_DEPTH_STEP = 2


@dataclass(frozen=True)
class DegeneracyCertificate:
    """Result of the affine-hull test on the supported jumps.

    When ``positive_definite`` is False, every jump ``v`` with ``q[a, v] > 0``
    for some state lies in ``anchor + span(directions)`` and ``normal`` is a
    unit vector orthogonal to that subspace.
    """

    positive_definite: bool
    support: np.ndarray
    anchor: np.ndarray
    directions: np.ndarray
    normals: np.ndarray

    @property
    def normal(self):
        return None if self.positive_definite else self.normals[0]

    def projected_diameter(self, w=None) -> float:
        w = self.normal if w is None else np.asarray(w, dtype=float)
        proj = self.support @ w
        return float(proj.max() - proj.min())

    def to_json_dict(self) -> dict:
        out = {
            "positive_definite": self.positive_definite,
            "support": self.support.tolist(),
            "anchor": self.anchor.tolist(),
            "directions": self.directions.tolist(),
        }
        if not self.positive_definite:
            out["normal"] = self.normal.tolist()
            out["normals"] = self.normals.tolist()
        return out


def _canonical_sign(v):
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    return -v if nz.size and v[nz[0]] < 0 else v


def degeneracy_check(model) -> DegeneracyCertificate:
    """Decide whether the supported jumps span a full-dimensional affine hull."""
    used = np.flatnonzero((model.q > 0).any(axis=0))
    if used.size == 0:
        raise EmptySupport("no jump has positive probability")
    support = model.jumps[used]
    anchor = support[0]
    diffs = (support - anchor).astype(float)
    _, s, vt = np.linalg.svd(diffs, full_matrices=True) if diffs.any() else (
        None, np.zeros(0), np.eye(model.d))
    rank = int(np.sum(s > 1e-9))
    directions = vt[:rank]
    normals = np.array([_canonical_sign(v) for v in vt[rank:]]).reshape(-1, model.d)
    return DegeneracyCertificate(
        positive_definite=rank == model.d,
        support=support,
        anchor=anchor,
        directions=directions,
        normals=normals,
    )


def jump_function(model) -> transfer.TruncatedPastFunction:
    """Jump vector of the current symbol, as a depth-1 vector function."""
    return transfer.TruncatedPastFunction.of_current_symbol(model.symbols.vectors.astype(float))


def drift(rpf: transfer.RPFAnalysis) -> np.ndarray:
    """Mean jump under the stationary symbol law."""
    cyl = rpf.cylinder_probabilities(1)
    return cyl @ rpf.model.symbols.vectors.astype(float)


@dataclass
class DiffusionReport:
    drift: np.ndarray
    diffusion: np.ndarray
    gk_terms: list = field(repr=False)
    lag_norms: np.ndarray = field(repr=False)
    truncation_lag: int = 0
    tail_estimate: float = 0.0
    depth: int = 0
    gamma_hat: float = 0.0
    certificate: DegeneracyCertificate | None = None
    depth_history: list = field(default_factory=list)

    @property
    def degenerate_directions(self):
        if self.certificate is None or self.certificate.positive_definite:
            return np.zeros((0, self.drift.size))
        return self.certificate.normals

    def variance_along(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ self.diffusion @ w)

    def to_json_dict(self) -> dict:
        return {
            "drift": self.drift.tolist(),
            "diffusion": self.diffusion.tolist(),
            "diffusion_row_major": self.diffusion.ravel().tolist(),
            "lag_norms": self.lag_norms.tolist(),
            "truncation_lag": self.truncation_lag,
            "tail_estimate": self.tail_estimate,
            "depth": self.depth,
            "gamma_hat": self.gamma_hat,
            "certificate": None if self.certificate is None else self.certificate.to_json_dict(),
            "depth_history": self.depth_history,
        }


def green_kubo(rpf: transfer.RPFAnalysis, j_max: int = DEFAULT_JMAX,
               tol: float = DEFAULT_GK_TOL) -> DiffusionReport:
    """Diffusion matrix ``C_0 + sum_{j>=1} (C_j + C_j^T)`` of the centered jumps.

    Lags are added until ``||C_j|| < tol * ||C_0||``. Raises
    :class:`TailNotSmall` if that has not happened by ``j_max``.
    """
    if j_max < 1:
        raise ValueError("j_max must be >= 1")
    model = rpf.model
    g = jump_function(model)
    terms, norms = [], []
    total = None
    c0_norm = None
    converged = False
    for j, c in transfer.lagged_covariances(g, rpf, j_max):
        c = np.atleast_2d(c)
        norm = float(np.linalg.norm(c))
        terms.append(c)
        norms.append(norm)
        if j == 0:
            total = c.copy()
            c0_norm = norm
            if c0_norm == 0.0:
                converged = True
                break
            continue
        total += c + c.T
        if norm < tol * c0_norm:
            converged = True
            break
    if not converged:
        raise TailNotSmall(
            f"lag covariance norm {norms[-1]:.3g} still above {tol:g} * ||C_0|| at j_max={j_max}"
        )
    diffusion = 0.5 * (total + total.T)
    return DiffusionReport(
        drift=drift(rpf),
        diffusion=diffusion,
        gk_terms=terms,
        lag_norms=np.array(norms),
        truncation_lag=len(terms) - 1,
        tail_estimate=transfer.geometric_tail(norms[-1], rpf.gamma_hat),
        depth=rpf.depth,
        gamma_hat=rpf.gamma_hat,
        certificate=degeneracy_check(model),
    )


def diffusion_report(model, depth="auto", tol: float = DEFAULT_GK_TOL,
                     j_max: int = DEFAULT_JMAX, rpf_tol: float = 1e-12,
                     depth_tol: float = DEFAULT_DEPTH_TOL):
    """Run the RPF iteration and Green-Kubo sum; returns ``(report, rpf)``.

    With ``depth="auto"`` the depth starts at 4 and grows by 2 until drift and
    diffusion matrix move by less than ``depth_tol`` or the next table would
    exceed the size guard. Each step is recorded in ``report.depth_history``.
    """
    if depth != "auto":
        rpf = transfer.rpf_fixed_point(model, int(depth), rpf_tol)
        return green_kubo(rpf, j_max, tol), rpf
    history = []
    prev = None
    d = AUTO_DEPTH_START
    while True:
        try:
            rpf = transfer.rpf_fixed_point(model, d, rpf_tol)
        except HorizonTooLarge:
            if prev is None:
                raise
            history.append({"depth": d, "skipped": "table guard"})
            break
        rep = green_kubo(rpf, j_max, tol)
        entry = {"depth": d}
        if prev is not None:
            change = max(float(np.abs(rep.drift - prev[0].drift).max()),
                         float(np.abs(rep.diffusion - prev[0].diffusion).max()))
            entry["change"] = change
        history.append(entry)
        prev = (rep, rpf)
        if "change" in entry and entry["change"] < depth_tol:
            break
        d += AUTO_DEPTH_STEP
    rep, rpf = prev
    rep.depth_history = history
    return rep, rpf

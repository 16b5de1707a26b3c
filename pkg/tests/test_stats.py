import json
from types import SimpleNamespace

import numpy as np
import pytest

from rwdre import stats
from rwdre.errors import DegenerateDirection, InsufficientEnvironments, NoDecayDetected
from rwdre.limits import degeneracy_check


def _report(drift, diffusion, support=None):
    cert = None if support is None else SimpleNamespace(support=np.asarray(support))
    return SimpleNamespace(drift=np.atleast_1d(drift), diffusion=np.atleast_2d(diffusion),
                           certificate=cert)


def _gaussian(n, reps, drift, cov, seed=0):
    rng = np.random.default_rng(seed)
    return rng.multivariate_normal(n * np.asarray(drift), n * np.asarray(cov), size=reps)


def test_ks_calibration():
    cal = stats.ks_calibration(sample_size=10_000, trials=200, seed=3)
    assert cal["passed"]
    assert abs(cal["rejection_rate"] - 0.01) <= cal["band"]


def test_default_directions():
    assert np.array_equal(stats.default_directions(1), [[1.0]])
    dirs = stats.default_directions(2)
    assert dirs.shape == (7, 2)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1)
    assert np.array_equal(dirs, stats.default_directions(2))


def test_annealed_clt_accepts_gaussian_samples():
    drift, cov = [0.1, -0.2], [[1.0, 0.3], [0.3, 0.5]]
    pos = _gaussian(1000, 20_000, drift, cov)
    v = stats.test_annealed_clt(pos, _report(drift, cov), n=1000)
    assert v.passed, v.criteria
    assert np.all(np.abs(v.z_mean) < 0.05) and np.all(np.abs(v.z_var - 1) < 0.05)


def test_annealed_clt_detects_wrong_drift_and_variance():
    drift, cov = [0.1], [[1.0]]
    pos = _gaussian(1000, 20_000, drift, cov, seed=1)
    shifted = stats.test_annealed_clt(pos + 5.0, _report(drift, cov), n=1000)
    assert not shifted.criteria["drift"] and not shifted.criteria["ks"]
    wide = stats.test_annealed_clt(pos, _report(drift, [[0.8]]), n=1000)
    assert not wide.criteria["covariance"] and not wide.passed


def test_annealed_clt_needs_replicas():
    with pytest.raises(ValueError):
        stats.test_annealed_clt(np.zeros((100, 1)), _report([0.0], [[1.0]]), n=10)


def test_degenerate_direction_rejected():
    rep = _report([0.0, 0.0], [[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(DegenerateDirection):
        stats.test_annealed_clt(np.zeros((20_000, 2)), rep, n=10)
    v = stats.test_annealed_clt(_gaussian(10, 20_000, [0, 0], [[1, 0], [0, 0]]), rep,
                                directions=[[1.0, 0.0]], n=10)
    assert v.criteria["ks"]


@pytest.mark.parametrize("support, w, span", [
    ([[1], [-1]], [1.0], 2.0),
    ([[1, 0], [-1, 0], [0, 1], [0, -1]], [1.0, 0.0], 1.0),
    ([[1, 0], [-1, 0], [0, 1], [0, -1]], [2 ** -0.5, 2 ** -0.5], 2 ** 0.5),
    ([[1, 0], [-1, 0], [0, 1], [0, -1]], [0.6, 0.8], 0.2),
    ([[1], [1]], [1.0], 0.0),
])
def test_lattice_span(support, w, span):
    assert stats.lattice_span(support, w) == pytest.approx(span, abs=1e-9)


def test_lattice_span_irrational_direction():
    w = np.array([1.0, np.sqrt(2)]) / np.sqrt(3)
    assert stats.lattice_span([[1, 0], [-1, 0], [0, 1], [0, -1]], w) == 0.0


def test_jitter_removes_lattice_artifact():
    # exact binomial walk: raw KS sees the lattice atoms, the jittered sample is continuous
    n, reps = 10_000, 200_000
    pos = (2 * np.random.default_rng(5).binomial(n, 0.75, size=reps) - n)[:, None]
    rep = _report([0.5], [[0.75]], support=[[1], [-1]])
    raw = stats.test_annealed_clt(pos, rep, n=n, continuity=False)
    fixed = stats.test_annealed_clt(pos, rep, n=n)
    assert raw.p_values[0] < 0.01 < fixed.p_values[0]
    assert fixed.spans[0] == 2.0 and raw.spans[0] == 0.0


def _envs(count, walkers, shifts=None, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for e in range(count):
        pos = rng.normal(0.0, 10.0, size=(walkers, 1))
        if shifts is not None:
            pos += shifts[e]
        out.append(SimpleNamespace(positions=pos, n=100))
    return out


def test_quenched_clt_accepts_shared_gaussian_law():
    v = stats.test_quenched_clt(_envs(60, 2000), _report([0.0], [[1.0]]))
    assert v.passed, (v.rejection_fraction, v.uniformity_p)
    assert v.p_values.shape == (60, 1)


def test_quenched_clt_detects_environment_shifts():
    shifts = np.random.default_rng(1).normal(0, 3.0, 60)
    v = stats.test_quenched_clt(_envs(60, 2000, shifts), _report([0.0], [[1.0]]))
    assert not v.passed and v.rejection_fraction > 0.3


def test_quenched_clt_guards():
    with pytest.raises(InsufficientEnvironments):
        stats.test_quenched_clt(_envs(29, 2000), _report([0.0], [[1.0]]))
    with pytest.raises(ValueError):
        stats.test_quenched_clt(_envs(30, 500), _report([0.0], [[1.0]]))


def test_verdicts_serialize():
    v = stats.test_annealed_clt(_gaussian(100, 10_000, [0.0], [[1.0]]), _report([0.0], [[1.0]]),
                                n=100)
    d = json.loads(json.dumps(v.to_json_dict()))
    assert d["passed"] == v.passed and len(d["directions"]) == 1
    assert v.to_csv().count("\n") >= 2
    q = stats.test_quenched_clt(_envs(30, 1000), _report([0.0], [[1.0]]))
    dq = json.loads(json.dumps(q.to_json_dict()))
    assert dq["environments"] == 30
    assert q.to_csv().count("\n") == 31


def test_mixing_two_state_decays(two_state):
    fit = stats.fit_mixing_rate(two_state, stats.state_indicator(two_state), 2, range(1, 9))
    assert 0 < fit.gamma_emp < 1
    assert fit.monotone_beyond(2)
    assert fit.errors[0] > 10 * fit.errors[-1]
    assert fit.fitted.sum() >= 2
    json.dumps(fit.to_json_dict())


def test_mixing_mc_agrees_with_exact(two_state):
    f = stats.state_indicator(two_state)
    exact = stats.fit_mixing_rate(two_state, f, 1, [1, 2, 3])
    mc = stats.fit_mixing_rate(two_state, f, 1, [1, 2, 3], mode="mc", seed=2,
                                continuations=10**6, fit_factor=2)
    assert np.all(np.abs(mc.errors - exact.errors) <= mc.floor)


def test_mixing_iid_jump_control(iid):
    with pytest.raises(NoDecayDetected) as info:
        stats.fit_mixing_rate(iid, stats.jump_indicator(iid), 2, range(1, 7))
    assert np.all(info.value.errors < info.value.floor)


def test_mixing_argument_checks(two_state):
    f = stats.state_indicator(two_state)
    with pytest.raises(ValueError):
        stats.fit_mixing_rate(two_state, f, 1, [0, 1])
    with pytest.raises(ValueError):
        stats.fit_mixing_rate(two_state, f, 1, [1], mode="guess")
    with pytest.raises(ValueError):
        stats.fit_mixing_rate(two_state, f, 1, [1], mode="mc", continuations=10)


def test_support_from_certificate(plane2d):
    cert = degeneracy_check(plane2d)
    spans = stats._spans(SimpleNamespace(certificate=cert), np.eye(2), None)
    assert np.allclose(spans, [1.0, 1.0])

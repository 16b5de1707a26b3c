import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwdre import builtin_model, load_model, validate_model
from rwdre.errors import (DimensionMismatch, DuplicateJump, ModelError, NonPositiveTransition,
                          NonStochasticRow)
from rwdre.model import (ChainAnalysis, builtin_model_names, k_step, second_eigenvalue_modulus,
                         stationary_distribution)

from tests.conftest import TWO_STATE


def test_builtin_two_state_matches_reference(two_state):
    assert np.array_equal(two_state.p, np.array(TWO_STATE["p"]))
    assert two_state.d == 1 and two_state.n_states == 2 and two_state.n_jumps == 2
    assert builtin_model_names()[:1]


def test_two_state_stationary_closed_form(two_state):
    # pi = (beta, alpha) / (alpha + beta) for a two-state chain
    alpha, beta = 0.3, 0.4
    assert np.allclose(two_state.chain.pi, [beta / (alpha + beta), alpha / (alpha + beta)],
                       atol=1e-14)
    assert two_state.chain.lam == pytest.approx(abs(1 - alpha - beta), abs=1e-12)


def test_single_state_chain(single_state):
    assert single_state.chain.pi.tolist() == [1.0]
    assert single_state.chain.lam == 0.0


def test_k_step_matches_matrix_power(two_state):
    for k in (1, 5, 37):
        assert np.allclose(k_step(two_state.p, k), np.linalg.matrix_power(two_state.p, k),
                           atol=1e-14)
    assert np.array_equal(k_step(two_state.p, 1), two_state.p)
    with pytest.raises(ValueError):
        k_step(two_state.p, 0)


def test_power_beyond_cutoff_is_pi(two_state):
    chain = two_state.chain
    assert np.allclose(chain.power(chain.cutoff + 10), np.tile(chain.pi, (2, 1)), atol=1e-15)
    assert np.allclose(chain.power(chain.cutoff), np.tile(chain.pi, (2, 1)), atol=1e-14)


def test_mixing_rate_fit_recovers_lambda(two_state):
    rate, _ = two_state.chain.fit_mixing_rate()
    assert rate == pytest.approx(0.3, rel=1e-6)


def test_large_chain_power_iteration():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.1, 1.0, (80, 80))
    p /= p.sum(axis=1, keepdims=True)
    pi = stationary_distribution(p)
    assert np.allclose(pi @ p, pi, atol=1e-13)
    assert pi.sum() == pytest.approx(1.0, abs=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_stationary_distribution_property(k, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.01, 1.0, (k, k))
    p /= p.sum(axis=1, keepdims=True)
    pi = stationary_distribution(p)
    assert np.all(pi > 0)
    assert np.allclose(pi @ p, pi, atol=1e-12)
    eig = np.sort(np.abs(np.linalg.eigvals(p)))[::-1]
    assert second_eigenvalue_modulus(p) == pytest.approx(eig[1] if k > 1 else 0.0, abs=1e-9)


@pytest.mark.parametrize("mutate, exc, path", [
    (lambda m: m.update(p=[[0.7, 0.2], [0.4, 0.6]]), NonStochasticRow, "p[0]"),
    (lambda m: m.update(p=[[1.0, 0.0], [0.4, 0.6]]), NonPositiveTransition, "p[0][1]"),
    (lambda m: m.update(jumps=[[1], [1]]), DuplicateJump, "jumps[1]"),
    (lambda m: m.update(jumps=[[1, 0], [-1, 0]]), DimensionMismatch, "jumps[0]"),
    (lambda m: m.update(q=[[1.0], [1.0]]), DimensionMismatch, "q"),
    (lambda m: m.update(q=[[1.2, -0.2], [0.0, 1.0]]), NonStochasticRow, "q[0][1]"),
    (lambda m: m.update(alphabet=["a"]), DimensionMismatch, "alphabet"),
    (lambda m: m.pop("q"), ModelError, "q"),
])
def test_validation_errors_cite_field(mutate, exc, path):
    raw = json.loads(json.dumps(TWO_STATE))
    mutate(raw)
    with pytest.raises(exc) as info:
        validate_model(raw)
    assert info.value.path.startswith(path)


def test_row_sum_tolerance():
    raw = json.loads(json.dumps(TWO_STATE))
    raw["p"] = [[0.7 + 5e-13, 0.3], [0.4, 0.6]]
    validate_model(raw)
    raw["p"] = [[0.7 + 5e-11, 0.3], [0.4, 0.6]]
    with pytest.raises(NonStochasticRow):
        validate_model(raw)


def test_load_model_roundtrip(tmp_path, two_state):
    f = tmp_path / "m.json"
    f.write_text(json.dumps(two_state.to_dict()))
    again = load_model(f)
    assert again.digest() == two_state.digest()
    f.write_text("{not json")
    with pytest.raises(ModelError):
        load_model(f)


def test_digest_changes_with_content(two_state):
    assert two_state.scaled(2).digest() != two_state.digest()
    assert two_state.relabeled([1, 0]).digest() != two_state.digest()


def test_relabeled_is_same_walk(two_state):
    m = two_state.relabeled([1, 0], [1, 0])
    assert np.allclose(m.chain.pi, two_state.chain.pi[::-1])
    assert np.array_equal(m.jumps, two_state.jumps[::-1])


def test_chain_analysis_from_matrix():
    ca = ChainAnalysis.from_matrix([[0.5, 0.5], [0.5, 0.5]])
    assert ca.lam == pytest.approx(0.0, abs=1e-15)
    assert ca.cutoff >= 1


@pytest.mark.parametrize("name", builtin_model_names())
def test_all_builtins_validate(name):
    m = builtin_model(name)
    assert validate_model(m.to_dict()).digest() == m.digest()

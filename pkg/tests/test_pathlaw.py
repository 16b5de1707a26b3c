import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rwdre import validate_model
from rwdre.errors import EnumerationTooLarge, HorizonTooLarge
from rwdre.pathlaw import (Symbol, enumerate_walk_law, exact_word_probability, last_return,
                           log_word_probability, potential, word_probabilities)

from tests.conftest import brute_force_word_probability


def _positions(word, jumps):
    pos = [np.zeros(jumps.shape[1], dtype=int)]
    for _, v in word:
        pos.append(pos[-1] + jumps[v])
    return pos


def _last_return_oracle(word, jumps):
    pos = _positions(word, jumps)
    now = pos[len(word) - 1]
    for back in range(1, len(word)):
        if np.array_equal(pos[len(word) - 1 - back], now):
            return -back
    return None


@st.composite
def small_models(draw):
    k = draw(st.integers(1, 3))
    d = draw(st.integers(1, 2))
    n_j = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 1, (k, k))
    p /= p.sum(axis=1, keepdims=True)
    q = rng.uniform(0, 1, (k, n_j)) * (rng.uniform(size=(k, n_j)) > 0.3)
    q[:, 0] += 0.1
    q /= q.sum(axis=1, keepdims=True)
    pool = [c for c in itertools.product([-1, 0, 1], repeat=d)]
    idx = rng.choice(len(pool), size=n_j, replace=False)
    jumps = [list(pool[i]) for i in idx]
    return validate_model({"d": d, "p": p.tolist(), "jumps": jumps, "q": q.tolist()})


def test_last_return_examples(two_state):
    up, down = Symbol(0, 0), Symbol(1, 1)
    assert last_return([up], two_state.jumps) is None
    assert last_return([up, down, up], two_state.jumps) == -2
    assert last_return([up, up, up], two_state.jumps) is None
    with pytest.raises(ValueError):
        last_return([], two_state.jumps)


@settings(max_examples=60, deadline=None)
@given(small_models(), st.integers(1, 8), st.integers(0, 2**31))
def test_last_return_matches_position_scan(model, n, seed):
    rng = np.random.default_rng(seed)
    syms = model.symbols.symbols
    word = [syms[i] for i in rng.integers(len(syms), size=n)]
    assert last_return(word, model.jumps) == _last_return_oracle(word, model.jumps)


@settings(max_examples=40, deadline=None)
@given(small_models(), st.integers(0, 6), st.integers(0, 2**31))
def test_potential_normalized(model, n, seed):
    rng = np.random.default_rng(seed)
    syms = model.symbols.symbols
    past = [syms[i] for i in rng.integers(len(syms), size=n)]
    total = sum(math.exp(potential(past + [b], model)) for b in syms)
    assert total == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_word_probability_matches_environment_brute_force(two_state, n):
    syms = two_state.symbols.symbols
    for word in itertools.product(syms, repeat=n):
        assert exact_word_probability(word, two_state) == pytest.approx(
            brute_force_word_probability(two_state, word), abs=1e-14)


def test_word_probability_brute_force_2d(plane2d):
    rng = np.random.default_rng(0)
    syms = plane2d.symbols.symbols
    for _ in range(20):
        word = [syms[i] for i in rng.integers(len(syms), size=3)]
        assert exact_word_probability(word, plane2d) == pytest.approx(
            brute_force_word_probability(plane2d, word), abs=1e-14)


def test_log_word_probability_consistent(two_state):
    word = (Symbol(0, 0), Symbol(1, 1), Symbol(1, 1), Symbol(0, 0))
    assert math.exp(log_word_probability(word, two_state)) == pytest.approx(
        exact_word_probability(word, two_state), rel=1e-13)


def test_potential_rejects_non_symbol(two_state):
    with pytest.raises(ValueError):
        potential([Symbol(0, 1)], two_state)


def test_word_probabilities_kernel_matches_python(two_state, plane2d):
    for model, n in ((two_state, 6), (plane2d, 3)):
        alph = model.symbols
        probs = word_probabilities(model, n)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        for code in range(len(probs)):
            w = alph.decode(code, n)
            assert probs[code] == pytest.approx(exact_word_probability(w, model), abs=1e-15)


def test_word_probabilities_conditional(two_state):
    alph = two_state.symbols
    prefix = (Symbol(0, 0), Symbol(1, 1))
    cond = word_probabilities(two_state, 3, prefix)
    joint = word_probabilities(two_state, 5)
    head = alph.encode(prefix)
    block = joint[head * 8:(head + 1) * 8]
    assert np.allclose(cond, block / block.sum(), atol=1e-14)


def test_first_step_mean(two_state):
    law = enumerate_walk_law(two_state, 1)
    assert law.mean[0] == pytest.approx(1 / 7, abs=1e-14)


def test_iid_two_step_law(iid):
    law = enumerate_walk_law(iid, 2).as_dict()
    assert law[(2,)] == pytest.approx(0.5625, abs=1e-15)
    assert law[(0,)] == pytest.approx(0.375, abs=1e-15)
    assert law[(-2,)] == pytest.approx(0.0625, abs=1e-15)


@pytest.mark.parametrize("n", [5, 11])
def test_iid_law_is_binomial(iid, n):
    law = enumerate_walk_law(iid, n)
    for k in range(n + 1):
        assert law.prob(2 * k - n) == pytest.approx(math.comb(n, k) * 0.75**k * 0.25**(n - k),
                                                    abs=1e-12)


def test_single_state_is_deterministic(single_state):
    law = enumerate_walk_law(single_state, 7)
    assert law.as_dict() == {(7,): 1.0}


def test_law_matches_word_sum(plane2d):
    n = 4
    law = enumerate_walk_law(plane2d, n)
    alph = plane2d.symbols
    probs = word_probabilities(plane2d, n)
    acc = {}
    for code, pr in enumerate(probs):
        end = tuple(int(c) for c in alph.vectors[alph.indices(alph.decode(code, n))].sum(axis=0))
        acc[end] = acc.get(end, 0.0) + pr
    got = law.as_dict()
    assert set(got) == {k for k, v in acc.items() if v > 0}
    for k, v in acc.items():
        assert got.get(k, 0.0) == pytest.approx(v, abs=1e-14)
    assert law.total_mass == pytest.approx(1.0, abs=1e-12)


def test_enumeration_guard(two_state):
    with pytest.raises(EnumerationTooLarge) as info:
        enumerate_walk_law(two_state, 40)
    assert info.value.guard == "ENUMERATION_GUARD"
    with pytest.raises(HorizonTooLarge):
        word_probabilities(two_state, 30)


def test_pruned_law_is_flagged(two_state):
    law = enumerate_walk_law(two_state, 14, prune=1e-6)
    assert not law.exact
    assert 0.9 < law.total_mass < 1.0
    exact = enumerate_walk_law(two_state, 14)
    assert law.mean[0] == pytest.approx(exact.mean[0], abs=1e-3)


def test_scaling_jumps_scales_law(two_state):
    a = enumerate_walk_law(two_state, 5).as_dict()
    b = enumerate_walk_law(two_state.scaled(3), 5).as_dict()
    assert {(3 * k[0],): v for k, v in a.items()} == pytest.approx(b)


def test_csv_and_json(two_state):
    law = enumerate_walk_law(two_state, 3)
    lines = law.to_csv().strip().splitlines()
    assert lines[0] == "x0,probability" and len(lines) == 5
    assert law.to_json_dict()["total_mass"] == pytest.approx(1.0)

import numpy as np
import pytest

from rwdre import sim
from rwdre.errors import HorizonTooLarge
from rwdre.pathlaw import Symbol, word_probabilities
from rwdre.transfer import (TransferOperator, TruncatedPastFunction, absolute_continuity_ratios,
                            apply_operator, conditional_expectation, contraction_profile,
                            lagged_covariance, lagged_covariances, one_symbol_conditionals,
                            rpf_fixed_point)


def late_window_law(model, n, k):
    """Exact law of symbols n-k .. n-1 of the walk, by full enumeration."""
    nsym = len(model.symbols)
    probs = word_probabilities(model, n)
    return probs.reshape(-1, nsym**k).sum(axis=0)


@pytest.fixture(scope="module")
def rpf10(two_state):
    return rpf_fixed_point(two_state, 10)


@pytest.mark.parametrize("depth", range(1, 9))
def test_operator_preserves_constants(two_state, plane2d, depth):
    for model in (two_state, plane2d):
        if len(model.symbols) ** depth > 70000:
            continue
        op = TransferOperator(model, depth)
        one = TruncatedPastFunction.constant(len(model.symbols), depth)
        assert np.max(np.abs(op.apply(one).values - 1.0)) <= 1e-14


def test_operator_is_sup_contraction(two_state):
    rng = np.random.default_rng(0)
    op = TransferOperator(two_state, 5)
    for _ in range(100):
        f = rng.normal(size=op.size) * rng.uniform(0.1, 10)
        assert np.max(np.abs(op.apply(f))) <= np.max(np.abs(f)) * (1 + 1e-15)


def test_apply_matches_explicit_sum(two_state):
    # (Lf)(w) = sum_b P(b | w) f(w shifted by b), checked against the potential directly
    from rwdre.pathlaw import potential
    depth = 3
    alph = two_state.symbols
    nsym = len(alph)
    rng = np.random.default_rng(1)
    f = rng.normal(size=nsym**depth)
    lf = TransferOperator(two_state, depth).apply(f)
    for code in range(nsym**depth):
        word = list(alph.decode(code, depth))
        want = 0.0
        for b, sym in enumerate(alph.symbols):
            nxt = (code % nsym ** (depth - 1)) * nsym + b
            want += np.exp(potential(word + [sym], two_state)) * f[nxt]
        assert lf[code] == pytest.approx(want, abs=1e-13)


def test_apply_operator_wrapper(two_state):
    f = TruncatedPastFunction.of_current_symbol([1.0, -1.0], depth=2)
    g = apply_operator(f, two_state)
    assert g.depth == 2 and g.values.shape == (4,)


def test_adjoint_preserves_mass(two_state):
    op = TransferOperator(two_state, 6)
    mu = np.random.default_rng(0).uniform(size=op.size)
    mu /= mu.sum()
    assert op.adjoint(mu).sum() == pytest.approx(1.0, abs=1e-14)


def test_fixed_point_invariance(rpf10):
    rng = np.random.default_rng(2)
    f = rng.normal(size=rpf10.mu_minus.size)
    mu = rpf10.mu_minus
    assert np.dot(mu, rpf10.operator.apply(f)) == pytest.approx(np.dot(mu, f), abs=1e-12)
    assert rpf10.gamma_hat < 1


def test_cylinder_law_matches_late_time_enumeration(two_state, rpf10):
    # the stationary cylinder law is the limit of the exact law of a late window
    for k in (1, 2, 3):
        exact = late_window_law(two_state, 16, k)
        assert np.allclose(rpf10.cylinder_probabilities(k), exact, atol=1e-7)


def test_cylinder_law_2d_against_enumeration(plane2d):
    rpf = rpf_fixed_point(plane2d, 5)
    exact = late_window_law(plane2d, 7, 1)
    assert np.allclose(rpf.cylinder_probabilities(1), exact, atol=2e-5)


def test_shift_consistency_within_table(rpf10):
    nsym = rpf10.n_symbols
    for k in range(1, 6):
        assert np.allclose(rpf10.cylinder_probabilities(k), rpf10.oldest_marginal(k), atol=1e-12)
    assert rpf10.cylinder_probabilities(0).sum() == pytest.approx(1.0)
    assert nsym == 2


def test_depth_convergence(two_state, rpf10):
    rpf6 = rpf_fixed_point(two_state, 6)
    diff = np.abs(rpf6.cylinder_probabilities(2) - rpf10.cylinder_probabilities(2)).max()
    assert diff < 1e-4


def test_contraction_profile_decays(two_state):
    rpf = rpf_fixed_point(two_state, 6)
    prof = contraction_profile(rpf)
    assert prof[-1] < 1e-12 < prof[0]
    # strictly smaller two iterations later (odd and even steps decay separately)
    live = prof[2:] > 1e-12
    assert np.all(prof[2:][live] < prof[:-2][live])


def test_iid_transfer_gamma_zero_allowed(single_state):
    rpf = rpf_fixed_point(single_state, 3)
    assert rpf.mu_minus.tolist() == [1.0]
    assert rpf.gamma_hat == 0.0


def test_table_guard(plane2d):
    with pytest.raises(HorizonTooLarge) as info:
        rpf_fixed_point(plane2d, 14)
    assert info.value.guard == "TABLE_GUARD"


def test_lagged_covariance_matches_enumeration(two_state, rpf10):
    # Cov(v_t, v_{t+j}) at a late time t from the exact law of the walk
    g = TruncatedPastFunction.of_current_symbol([1.0, -1.0])
    t = 13
    for j in (0, 1, 2, 3):
        law = late_window_law(two_state, t + j + 1, j + 1)
        codes = np.arange(law.size)
        first = np.where(codes // 2**j % 2 == 0, 1.0, -1.0)
        last = np.where(codes % 2 == 0, 1.0, -1.0)
        cov = np.dot(law, first * last) - np.dot(law, first) * np.dot(law, last)
        assert lagged_covariance(g, j, rpf10) == pytest.approx(cov, abs=1e-6)


def test_lagged_covariances_generator(two_state, rpf10):
    g = TruncatedPastFunction.of_current_symbol([1.0, -1.0])
    gen = dict(lagged_covariances(g, rpf10, 5))
    for j in range(6):
        assert gen[j] == pytest.approx(lagged_covariance(g, j, rpf10), abs=1e-15)


def test_conditional_expectation_exact_sum(two_state):
    alph = two_state.symbols
    prefix = (Symbol(0, 0), Symbol(1, 1), Symbol(0, 0))
    f = TruncatedPastFunction.of_current_symbol([1.0, 0.0])
    n = 5
    joint = word_probabilities(two_state, n + 1)
    head = alph.encode(prefix)
    block = joint.reshape(2**3, -1)[head]
    want = np.dot(block / block.sum(), np.arange(block.size) % 2 == 0)
    assert conditional_expectation(prefix, f, n, two_state) == pytest.approx(want, abs=1e-14)
    # a window inside the prefix is just read off
    assert conditional_expectation(prefix, f, 1, two_state) == 0.0
    assert conditional_expectation((), f, 0, two_state) == pytest.approx(4 / 7)


def test_conditional_expectation_against_simulation(two_state):
    prefix = ((0, 0), (1, 1), (1, 1))
    f = TruncatedPastFunction.of_current_symbol([1.0, 0.0])
    n = 6
    exact = conditional_expectation(prefix, f, n, two_state)
    run = sim.run_annealed(two_state, n + 1, 200_000, seed=5, record_words=True, prefix=prefix)
    assert np.all(run.words[:, :3] == np.array([0, 1, 1]))
    hits = run.words[:, n] == 0
    se = np.sqrt(exact * (1 - exact) / hits.size)
    assert abs(hits.mean() - exact) < 4 * se


def test_absolute_continuity_ratios_positive(two_state, rpf10):
    r = absolute_continuity_ratios(two_state, rpf10, 2)
    assert np.all(r > 0) and np.all(np.isfinite(r))


def test_one_symbol_conditionals_rows(rpf10):
    c = one_symbol_conditionals(rpf10, 3)
    assert np.allclose(c.sum(axis=1), 1.0)


def test_truncated_function_checks():
    with pytest.raises(ValueError):
        TruncatedPastFunction(2, np.zeros(3), 2)
    f = TruncatedPastFunction.of_current_symbol([1.0, 2.0])
    with pytest.raises(ValueError):
        f.lift(2).lift(1)
    assert f.lift(3)(0b101) == 2.0

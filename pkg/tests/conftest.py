import itertools
import math

import numpy as np
import pytest

from rwdre import builtin_model
from rwdre.limits import diffusion_report

TWO_STATE = {"d": 1, "alphabet": ["up", "down"], "p": [[0.7, 0.3], [0.4, 0.6]],
             "jumps": [[1], [-1]], "q": [[1.0, 0.0], [0.0, 1.0]]}


@pytest.fixture(scope="session")
def two_state():
    return builtin_model("two_state")


@pytest.fixture(scope="session")
def iid():
    return builtin_model("iid")


@pytest.fixture(scope="session")
def single_state():
    return builtin_model("single_state")


@pytest.fixture(scope="session")
def line2d():
    return builtin_model("line2d")


@pytest.fixture(scope="session")
def diagonal2d():
    return builtin_model("diagonal2d")


@pytest.fixture(scope="session")
def plane2d():
    return builtin_model("plane2d")


@pytest.fixture(scope="session")
def noisy():
    return builtin_model("noisy_two_state")


@pytest.fixture(scope="session")
def two_state_report(two_state):
    return diffusion_report(two_state, depth=8)


@pytest.fixture(scope="session")
def iid_report(iid):
    return diffusion_report(iid, depth=4)


def brute_force_word_probability(model, word):
    """Probability of a symbol word by summing over every environment history.

    Each site the walk stands on gets a full state history over times
    ``0..n-1`` drawn from the stationary chain; histories of distinct sites are
    independent. Used only as an oracle, so it is deliberately naive.
    """
    n = len(word)
    pos = [np.zeros(model.d, dtype=int)]
    for _, v in word:
        pos.append(pos[-1] + model.jumps[v])
    sites = sorted({tuple(x) for x in pos[:n]})
    k = model.n_states
    pi = model.chain.pi
    total = 0.0
    for hist in itertools.product(range(k), repeat=n * len(sites)):
        h = np.array(hist).reshape(len(sites), n)
        w = 1.0
        for s in range(len(sites)):
            w *= pi[h[s, 0]]
            for t in range(1, n):
                w *= model.p[h[s, t - 1], h[s, t]]
        ok = all(h[sites.index(tuple(pos[t])), t] == word[t][0] for t in range(n))
        if ok:
            total += w
    return total * math.prod(model.q[a, v] for a, v in word)


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.lines():
        terminalreporter.write_line(line)

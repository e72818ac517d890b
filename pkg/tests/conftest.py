import math

import numpy as np
import pytest

from ssep.kernel import nearest_neighbor

# Acceptance results collected by test_acceptance.py and echoed in the summary.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def bessel_p(x, t, terms=400):
    """``e^{-t} I_|x|(t)`` for the rate-one nearest-neighbour walk on Z.

    Power series of the modified Bessel function with every term formed in
    log space, summed with fsum.
    """
    x = abs(int(x))
    if t == 0:
        return 1.0 if x == 0 else 0.0
    lt = math.log(t / 2.0)
    terms_ = [
        math.exp((2 * m + x) * lt - math.lgamma(m + 1) - math.lgamma(m + x + 1) - t)
        for m in range(terms)
    ]
    return math.fsum(terms_)


@pytest.fixture(scope="session")
def nn1():
    return nearest_neighbor(1)


@pytest.fixture(scope="session")
def nn2():
    return nearest_neighbor(2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import numpy as np
import pytest

from basisrisk import payoffs
from basisrisk.scenarios import build_spec


def bs_spec(payoff=None, mu=0.05, sigma=0.2, eta=0.1, T=1.0):
    """One GBM index that is also the traded asset."""
    return build_spec(1, 1, 1, "geometric", [mu], [[sigma]], [mu], [[sigma]], eta, T,
                      payoff or payoffs.zero(), name="bs")


def basis_risk_spec(payoff=None, a1=0.02, a2=0.25, alpha=0.03, beta=(0.12, 0.16), eta=0.1, T=1.0):
    """GBM index driven by the first of two factors, one asset loading on both."""
    return build_spec(1, 1, 2, "geometric", [a1], [[a2, 0.0]], [alpha], [list(beta)], eta, T,
                      payoff or payoffs.zero(), name="basis-risk")


def constant_spec(m, k, d, payoff=None, drift=None, vol=None, alpha=None, beta=None, eta=0.5, T=1.0, seed=0):
    rng = np.random.default_rng(seed)
    drift = np.zeros(m) if drift is None else drift
    vol = rng.normal(size=(m, d)) * 0.3 if vol is None else vol
    alpha = rng.normal(size=k) * 0.1 if alpha is None else alpha
    beta = rng.normal(size=(k, d)) + np.eye(k, d) * 2 if beta is None else beta
    return build_spec(m, k, d, "constant", drift, vol, alpha, beta, eta, T, payoff or payoffs.zero())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full-size acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

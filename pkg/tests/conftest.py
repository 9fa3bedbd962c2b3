import numpy as np
import pytest

from mogi.params import bivariate_design, trivariate_design
from mogi.realized import realize
from mogi.simulate import simulate_mogi


@pytest.fixture(scope="session")
def trivariate():
    return trivariate_design()


@pytest.fixture(scope="session")
def bivariate():
    return bivariate_design()


@pytest.fixture(scope="session")
def short_sim(trivariate):
    """Sixty simulated days of the three-asset design, 78 intraday steps."""
    return simulate_mogi(trivariate, 60, 78, seed=11)


@pytest.fixture(scope="session")
def short_series(short_sim, trivariate):
    return realize(short_sim.panels, trivariate.tau)


@pytest.fixture(scope="session")
def bivariate_series(bivariate):
    sim = simulate_mogi(bivariate, 80, 78, seed=5)
    return realize(sim.panels, bivariate.tau)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion and echo it."""

    def _report(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

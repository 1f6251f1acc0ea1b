import numpy as np
import pytest
from hypothesis import settings

from passport.market import MarketParams, TimeGrid

settings.register_profile("passport", max_examples=40, deadline=None)
settings.load_profile("passport")


@pytest.fixture
def market_1d():
    return MarketParams(r=0.002, sigma=[0.2], rho=[[1.0]], s0=[1.0])


@pytest.fixture
def market_2d():
    return MarketParams(r=0.002, sigma=[0.2, 0.3], rho=np.eye(2), s0=[1.0, 1.0])


@pytest.fixture
def market_2d_corr():
    return MarketParams(r=0.002, sigma=[0.2, np.sqrt(0.03)], rho=[[1.0, 0.9], [0.9, 1.0]], s0=[1.0, 1.0])


@pytest.fixture
def desk_grid():
    return TimeGrid.uniform(10.0, 10)


# -- acceptance summary ------------------------------------------------------------------
ACCEPTANCE = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{number}] {title}: {detail}")

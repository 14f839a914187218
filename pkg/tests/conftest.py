import numpy as np
import pytest

from rbprice.fem import build_operators
from rbprice.market_models import Model, OptionType, default_spec


@pytest.fixture(scope="session")
def bs_spec():
    return default_spec(Model.BLACK_SCHOLES, OptionType.AMERICAN_PUT)


@pytest.fixture(scope="session")
def bs_small(bs_spec):
    """Coarse Black-Scholes American put, cheap enough for training in tests."""
    return build_operators(bs_spec, 40, L=8)


@pytest.fixture(scope="session")
def heston_eu_small():
    return build_operators(default_spec(Model.HESTON, OptionType.EUROPEAN_CALL), (7, 13), L=6)


@pytest.fixture(scope="session")
def heston_am_small():
    return build_operators(default_spec(Model.HESTON, OptionType.AMERICAN_PUT), (7, 13), L=6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    def log(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from abcpmcmc.modelspec import bundled_model, parse_model

from oracles import IMMIGRATION_DEATH_SOURCE, IMMIGRATION_SOURCE, ZERO_SOURCE

LV_TRUE_LOG = np.array([0.0, -5.30, -0.51])

_criterion_lines = []


def record_criterion(number, passed, detail):
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'} | {detail}"
    _criterion_lines.append(line)
    print(line)
    return passed


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def lv():
    return bundled_model("lv")


@pytest.fixture(scope="session")
def aphid():
    return bundled_model("aphid")


@pytest.fixture(scope="session")
def gene():
    return bundled_model("gene")


@pytest.fixture(scope="session")
def immigration():
    return parse_model(IMMIGRATION_SOURCE)


@pytest.fixture(scope="session")
def immigration_death():
    return parse_model(IMMIGRATION_DEATH_SOURCE)


@pytest.fixture(scope="session")
def zero_model():
    return parse_model(ZERO_SOURCE)

import numpy as np
import pytest

from policyrank import data as D

_CRITERIA = []


@pytest.fixture
def report():
    """Record one acceptance line: report(number, name, passed, detail); passed=None means skipped."""
    def add(number, name, passed, detail=""):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"criterion {number} {name}: {status} {detail}".rstrip()
        _CRITERIA.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_data():
    data, truth = D.synth_generate(D.SynthSpec(n=600, d=4, seed=3))
    return data, truth


@pytest.fixture(scope="session")
def ponpare_data():
    data, truth = D.synth_generate(D.SynthSpec(n=400, d=6, n_classes=3, item_dim=2,
                                               assignment_effect=0.5, seed=5))
    return data, truth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

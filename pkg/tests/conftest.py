import numpy as np
import pytest

from fgdro.datagen import SyntheticSpec, generate


@pytest.fixture
def quad_clients():
    """The canonical quadratic fixture: N=10, d=5, heterogeneity 1."""
    return generate(SyntheticSpec("QUADRATIC_CLIENTS", 10, 5, 1.0, seed=0))


@pytest.fixture
def logreg_clients():
    return generate(SyntheticSpec("LOGREG_CLIENTS", 4, 3, 1.0, sizes=(20, 15, 20, 6), seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance_log(request):
    """Collect one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash[ACCEPTANCE]

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  [{number:2d}] {name}: {detail}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

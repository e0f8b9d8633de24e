import numpy as np
import pytest

from urban_structure import HyperParams, SpatialSystem, Theta


@pytest.fixture
def rng():
    return np.random.default_rng(20171002)


@pytest.fixture
def symmetric_pair():
    """Two origins, two destinations, mirror-symmetric costs."""
    system = SpatialSystem([1.0, 1.0], [[0.0, 1.0], [1.0, 0.0]])
    return system, Theta(0.8, 1.0), HyperParams(gamma=100.0, delta=0.1, kappa=1.1, K=2.0)


# One line per acceptance criterion, printed after the test session.
ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def record():
    def _record(number, status, detail):
        line = f"criterion {number:>2}: {status} - {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])

import numpy as np
import pytest

from semsphere.scene import SemanticPointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_cloud(points, labels):
    return SemanticPointCloud(np.asarray(points, dtype=float), np.asarray(labels, dtype=np.uint8))


ACCEPTANCE = {}


def record(number, name, passed, detail):
    """One summary line per acceptance criterion, printed at the end of the run."""
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])

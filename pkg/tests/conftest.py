import numpy as np
import pytest

from bssr.data import TriBatch
from bssr.diagnostics import InstanceSpec, random_instance


def make_batch(x_l, y_l, x_weak, x_strong, x_o, y_o, pseudo):
    n, m = len(y_l), len(pseudo)
    return TriBatch(
        np.asarray(x_l, float), np.asarray(y_l, float), np.asarray(x_weak, float),
        np.asarray(x_strong, float), np.asarray(x_o, float), np.asarray(y_o, float),
        np.asarray(pseudo, float), np.arange(n), np.arange(m), np.arange(n, 2 * n),
    )


@pytest.fixture
def tiny():
    """(net, ul, batch) with n=m=4, 1->8->8->1 net and an 8-wide learner."""
    return random_instance(3, InstanceSpec())


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

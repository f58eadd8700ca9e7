import numpy as np
import pytest

from flowpose import body

# one "[PASS]/[FAIL] criterion N: ..." line per acceptance criterion,
# echoed after the run summary so capture modes can't swallow them
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_model():
    return body.make_toy_model()


@pytest.fixture()
def rng():
    return np.random.default_rng(0)

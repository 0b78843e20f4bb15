import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("clcn", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("clcn")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

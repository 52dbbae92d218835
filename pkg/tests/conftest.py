import os
import tempfile

import numpy as np
import pytest

# One critical-value cache for the whole run, so tables are simulated once.
_CACHE = tempfile.mkdtemp(prefix="nnchange-cv-")
os.environ.setdefault("NNCHANGE_CACHE", _CACHE)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def cv_cache_dir():
    return os.environ["NNCHANGE_CACHE"]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

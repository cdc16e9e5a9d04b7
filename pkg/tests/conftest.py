import os

import numpy as np
import pytest

os.environ.setdefault("ARTIFACT_TEST_MODE", "1")

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """report(n, ok, detail): print and record one PASS/FAIL line for acceptance criterion n."""
    lines = request.config.stash[_CRITERIA]

    def report(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_CRITERIA]
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

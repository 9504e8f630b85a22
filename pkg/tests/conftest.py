import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tdsgl.data import InteractionDataset  # noqa: E402

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def toy_dataset():
    # u0 -> {i0, i1}, u1 -> {i0, i2}, u2 -> {i2}
    return InteractionDataset(3, 3, train=[(0, 0), (0, 1), (1, 0), (1, 2), (2, 2)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion():
    def record(name: str, passed: bool, detail: str = ""):
        ACCEPTANCE[name] = (passed, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0])):
        passed, detail = ACCEPTANCE[name]
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {name}"
        if detail:
            line += f" :: {detail}"
        terminalreporter.write_line(line)

from __future__ import annotations

import sys

import pytest

from levybsde.levy import LevyModel, TimeNet


@pytest.fixture
def model12() -> LevyModel:
    """Brownian part plus one jump atom (1, 2): mark masses 1 and 2, total 3."""
    return LevyModel(gamma=0.0, sigma=1.0, jump_atoms=((1.0, 2.0),), horizon=1.0)


@pytest.fixture
def model3() -> LevyModel:
    """Drift, Brownian part and two jump atoms."""
    return LevyModel(gamma=0.1, sigma=1.0, jump_atoms=((1.0, 1.0), (-0.5, 2.0)), horizon=1.0)


@pytest.fixture
def net4() -> TimeNet:
    return TimeNet.equidistant(4, 1.0, 2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

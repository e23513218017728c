from pathlib import Path

import numpy as np
import pytest

from dssl.scenario import load_scenario

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"

# 3 x 3 reference expected rates
RATES3 = np.array([[45.0, 70.0, 35.0], [30.0, 90.0, 60.0], [65.0, 10.0, 50.0]])

# six-state banded transition matrix and 3 x 5 rate matrix of the first simulation
BANDED = np.array(
    [
        [3 / 6, 2 / 6, 1 / 6, 0, 0, 0],
        [2 / 8, 3 / 8, 2 / 8, 1 / 8, 0, 0],
        [1 / 9, 2 / 9, 3 / 9, 2 / 9, 1 / 9, 0],
        [0, 1 / 9, 2 / 9, 3 / 9, 2 / 9, 1 / 9],
        [0, 0, 1 / 8, 2 / 8, 3 / 8, 2 / 8],
        [0, 0, 0, 1 / 6, 2 / 6, 3 / 6],
    ]
)
RATES3X5 = np.array([[45, 70, 35, 17.5, 12.5], [27.5, 90, 60, 15, 20], [65, 10, 50, 16.5, 30]])


@pytest.fixture(scope="session")
def rates3_scenario():
    return load_scenario(SCENARIOS / "rates3.yaml")


@pytest.fixture(scope="session")
def scenario_banded():
    return load_scenario(SCENARIOS / "banded.yaml")


@pytest.fixture(scope="session")
def scenario_ge():
    return load_scenario(SCENARIOS / "gilbert_elliott.yaml")


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: (int(k.split(".")[0].rstrip("ab")), k)):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")

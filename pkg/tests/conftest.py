import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from pdmm.problem import build_averaging_problem, draw_measurements, grid_topology  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid10():
    topo = grid_topology(10, 10)
    return build_averaging_problem(draw_measurements(100, 0), topo)


@pytest.fixture(scope="session")
def grid4():
    topo = grid_topology(4, 4)
    return build_averaging_problem(draw_measurements(16, 7), topo)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "REPORT", None):
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.REPORT):
        terminalreporter.write_line(mod.REPORT[key])

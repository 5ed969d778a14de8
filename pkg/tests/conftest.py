import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lsvpide.config import load_bundled
from lsvpide.model import JumpStructure, MeixnerParams

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# Meixner rows (a, b, d, m) of the jump test and its loadings
ROW_S = MeixnerParams(a=0.04, b=-0.33, d=52.0, m=0.1)
ROW_V = MeixnerParams(a=0.02, b=-0.5, d=40.0, m=0.03)
ROW_R = MeixnerParams(a=0.01, b=-0.2, d=30.0, m=0.01)
ROW_Z = MeixnerParams(a=0.03, b=-0.1, d=40.0, m=0.05)
LOADINGS = (1.0, 2.0, 3.0)


@pytest.fixture(scope="session")
def jump_structure() -> JumpStructure:
    return JumpStructure(ROW_S, ROW_V, ROW_R, ROW_Z, LOADINGS)


@pytest.fixture(scope="session")
def european_cfg():
    return load_bundled("european_call")


@pytest.fixture(scope="session")
def barrier_cfg():
    return load_bundled("double_barrier")


@pytest.fixture(scope="session")
def jumps_cfg():
    return load_bundled("up_and_out_jumps")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

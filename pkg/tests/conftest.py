import os

# must happen before numba is imported so thread budgets up to 8 can be compared
os.environ.setdefault("NUMBA_NUM_THREADS", "8")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stereofuse import synth
from stereofuse.core import Intrinsics, StereoRig

settings.register_profile(
    "default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def intr():
    return Intrinsics(fx=500.0, fy=500.0, cx=79.5, cy=59.5, width=160, height=120)


@pytest.fixture
def rig(intr):
    return StereoRig(intr, 0.1)


@pytest.fixture
def small_rig():
    return synth.default_rig(160, 120, fx=150.0, baseline=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# PASS/FAIL lines recorded by the acceptance tests
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

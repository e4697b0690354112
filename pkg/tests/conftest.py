import sys

import numpy as np
import pytest

from fleetdp.fleet import ConstraintLevel, EvSpec, Level
from fleetdp.market import Scenario


def ev(id=0, cap=100.0, lo=10.0, rate=10.0, init=30.0, target=30.0):
    return EvSpec(id, cap, lo, rate, init, target)


def scenario(rho, sigma, volumes, fleet, level=Level.L1, caps=None, seed=0):
    if caps is None and level >= Level.L2:
        total = sum(s.max_rate_kw for s in fleet)
        caps = (0.9 * total, 0.9 * total)
    lvl = ConstraintLevel(level, *(caps or (None, None)))
    return Scenario(len(rho), 0.25, rho, sigma, volumes, fleet, lvl, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])

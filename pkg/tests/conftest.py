import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dloadapt import sim

settings.register_profile("dloadapt", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dloadapt")


@pytest.fixture(scope="session")
def cfg():
    return sim.SimConfig()


@pytest.fixture(scope="session")
def rest_state(cfg):
    """Default scene: anchor at the origin, gripper 0.3 m along x, sagging under gravity."""
    return sim.initial_state(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])

import random

import pytest
from hypothesis import HealthCheck, settings

from rliot.device_sim import BulbSimulator
from rliot.env import load_goal
from rliot.protocol import load_dictionary

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def dictionary():
    return load_dictionary()


@pytest.fixture(scope="session")
def goal1():
    return load_goal("goal1")


@pytest.fixture(scope="session")
def goal2():
    return load_goal("goal2")


@pytest.fixture
def sim():
    s = BulbSimulator(rate_limit=False)
    yield s
    s.stop()


@pytest.fixture
def rng():
    return random.Random(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [v for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", [])
             for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

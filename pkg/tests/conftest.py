import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dpbridge.bridge import bridge_coeffs
from dpbridge.schedule import make_vp_schedule

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")

_CRITERIA = []


@pytest.fixture(scope="session")
def schedule():
    return make_vp_schedule()


@pytest.fixture(scope="session")
def bc(schedule):
    return bridge_coeffs(schedule)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one summary line per acceptance criterion."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import pytest

from sliceloop.datagen.generator import generate
from sliceloop.datagen.params import SimulationParams
from sliceloop.numerics import RngStream


@pytest.fixture(scope="session")
def theta():
    return SimulationParams()


@pytest.fixture(scope="session")
def small_ds(theta):
    """2000 samples from 20 users; shared, read-only."""
    from dataclasses import replace
    return generate(replace(theta, n_users=20), 2000, RngStream(11, "fixture"), created_at="")


@pytest.fixture(scope="session")
def full_ds(theta):
    return generate(theta, 10_000, RngStream(5, "fixture"), created_at="")


_VERDICT_LINES = []


@pytest.fixture(scope="session")
def verdict_lines():
    """Acceptance tests append one 'PASS/FAIL criterion N' line each."""
    return _VERDICT_LINES


def pytest_terminal_summary(terminalreporter):
    if _VERDICT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICT_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lgnn import systems

settings.register_profile("lgnn", deadline=None, max_examples=25, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lgnn")


def random_chain_state(topology, rng, max_angle=np.pi / 3, speed=2.0):
    """Feasible planar chain state with random angles and angular rates."""
    phi = -np.pi / 2 + rng.uniform(-max_angle, max_angle, topology.n_edges)
    phidot = rng.uniform(-speed, speed, topology.n_edges)
    return systems.chain_state_from_angles(topology, phi, phidot), phi, phidot


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def chain4():
    return systems.catalog("chain-4")


@pytest.fixture(scope="session")
def chain2():
    return systems.catalog("chain-2")


# acceptance verdicts, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

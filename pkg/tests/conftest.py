import numpy as np
import pytest

from artifact.datagen import WorldSizes, generate_world


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    sizes = WorldSizes(upstream_train=1200, upstream_test=300, victim_property=60, victim_nonproperty=1500,
                       attacker_property=60, attacker_nonproperty=1500, probe=16, inject_property=40,
                       inject_nonproperty=200)
    return generate_world(d=8, K=4, clusters_per_class=2, sizes=sizes, seed=3)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nclab.tower_core import build_tower, golden_spec, tall_spec
from nclab.transfer_ops import golden_observable

settings.register_profile("nclab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("nclab")


@pytest.fixture(scope="session")
def golden():
    return build_tower(golden_spec(8))


@pytest.fixture(scope="session")
def golden6():
    return build_tower(golden_spec(6))


@pytest.fixture(scope="session")
def small_golden():
    return build_tower(golden_spec(4))


@pytest.fixture(scope="session")
def tall():
    return build_tower(tall_spec(3))


@pytest.fixture(scope="session")
def golden_G(golden):
    return golden_observable(golden)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is not None and getattr(mod, "LINES", None):
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)

import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from esmc.embedding import FeatureSchema, FieldSpec  # noqa: E402
from esmc.simulator import preset, simulate, to_samples  # noqa: E402

settings.register_profile("suite", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_record():
    def record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_schema():
    return FeatureSchema((FieldSpec("u", 5, 2), FieldSpec("v", 4, 3)))


@pytest.fixture(scope="session")
def tiny_raw():
    return to_samples(simulate(preset("tiny")))


@pytest.fixture(scope="session")
def small_raw():
    """About 16k exposures with half the purchases deferred."""
    cfg = preset("default", n_users=200, n_items=100, deferred_purchase_rate=0.5)
    return to_samples(simulate(cfg))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

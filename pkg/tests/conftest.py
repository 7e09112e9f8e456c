import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from medaug import cohort

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_cohort():
    cfg = cohort.CohortConfig(n_patients=12, seed=3)
    return cohort.generate(cfg)


def tiny_config(**kw):
    """A cohort small enough for per-test generation."""
    base = dict(n_patients=6, image_size=(8, 8), seed=0)
    base.update(kw)
    return cohort.CohortConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for n in sorted(REPORT):
            terminalreporter.write_line(REPORT[n])

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cbl.synthscene import GenConfig, gen_corpus

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# filled by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_gen():
    return GenConfig(num_classes=3, num_proposals=20, num_scenes=24, feature_dim=8, seed=3)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_gen):
    return gen_corpus(tiny_gen)


def random_boxes(rng, n, grid=None):
    """Valid boxes in the unit square; ``grid`` snaps corners to make exact ties likely."""
    a = rng.uniform(0.0, 1.0, size=(n, 2))
    b = rng.uniform(0.0, 1.0, size=(n, 2))
    if grid:
        a = np.round(a * grid) / grid
        b = np.round(b * grid) / grid
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    hi = np.maximum(hi, lo + (1.0 / grid if grid else 1e-3))
    return np.concatenate([lo, hi], axis=1)

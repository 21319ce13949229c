import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rrt.core import Dataset
from rrt.grow import GrowConfig, grow
from rrt.simlab import DGPConfig, generate

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_data(n=80, p=3, sigma=1.0, seed=0):
    return generate(DGPConfig(n=n, p=p, sigma=sigma), np.random.default_rng(seed))


@pytest.fixture
def small():
    """(dataset, mu) with n=80, p=3, sigma=1."""
    return make_data()


@pytest.fixture
def small_tree(small):
    ds, _ = small
    cfg = GrowConfig(max_depth=2, min_split_size=20, min_leaf_size=8, tau=1.0, seed=5)
    return ds, grow(ds, cfg)


def random_dataset(rng, n, p):
    return Dataset(rng.standard_normal((n, p)), rng.standard_normal(n))


# Filled by test_acceptance.py; one line per criterion in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])

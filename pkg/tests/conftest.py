import numpy as np
import pytest

from talign import dataset as ds
from talign import geometry as geo


def random_rigid(rng, max_shift=5.0):
    return geo.make_transform(geo.euler_to_rotation(rng.uniform(-np.pi, np.pi, 3)), rng.uniform(-max_shift, max_shift, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic():
    samples, ideals = ds.generate_synthetic(6, seed=7, return_ideal=True)
    return samples, ideals


# lines recorded by the acceptance suite, echoed again in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

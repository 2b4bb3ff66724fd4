import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cavflow.flowgrid import GridShape
from cavflow.gradnet import init_mlp
from cavflow.synthflow import GeneratorConfig, generate, slice_windows

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_shape():
    return GridShape(8, 8, 2)


@pytest.fixture(scope="session")
def small_series(small_shape):
    return generate(GeneratorConfig(shape=small_shape, agents=3000, steps=160, seed=11))


@pytest.fixture(scope="session")
def small_windows(small_series):
    return slice_windows(small_series, 3)


@pytest.fixture(scope="session")
def small_model(small_shape):
    return init_mlp(small_shape, 3, hidden=(32, 32), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

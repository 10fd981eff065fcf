import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from countiptw.data_model import ScenarioConfig
from countiptw.dgm import generate_dataset
from countiptw.rng import substream

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(dgm="negbin", n=1000, rep=0, seed=11, true_rr=1.1):
    cfg = ScenarioConfig(dgm, true_rr, ("cbps",), n_obs=n, seed=seed)
    return generate_dataset(cfg, substream(seed, rep))


@pytest.fixture(scope="session")
def small_ds():
    return make_dataset(n=400)


@pytest.fixture(scope="session")
def medium_ds():
    return make_dataset(n=2000, rep=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_support import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)

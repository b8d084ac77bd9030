import numpy as np
import pytest
from hypothesis import settings

from geoscore.core import NoiseSchedule

# numerical kernels vary in cost; wall-clock deadlines only add flakiness
settings.register_profile("geoscore", deadline=None)
settings.load_profile("geoscore")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or scenario test")


def ou_at(sigma: float, T: float = 100.0):
    """Brownian schedule and the time at which ``sigma_t == sigma``."""
    return NoiseSchedule.ou(0.0, T), 0.5 * sigma * sigma


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[key])

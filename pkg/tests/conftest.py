import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from segxray.phantom import DatasetHandle
from segxray.zoo import ArchSpec, build_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_net64():
    """A small float64 skip network on 32x32 inputs (fast for gradient checks)."""
    return build_model(ArchSpec("skip", depth=2, base_channels=2), init_seed=3, dtype=np.float64)


@pytest.fixture(scope="session")
def small_data():
    return DatasetHandle(6, 11, 32, 32).arrays()


def pytest_configure(config):
    config.addinivalue_line("markers", "pipeline: trains desk-scale models (slow)")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

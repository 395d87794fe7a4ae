import numpy as np
import pytest

from halftruth.corpus import SynthesisConfig


@pytest.fixture(scope="session")
def cfg():
    return SynthesisConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks (acceptance suite)")

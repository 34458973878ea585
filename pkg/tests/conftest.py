import numpy as np
import pytest

from biosoram.params import Config, derive_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    return Config(2**10, 256, 1024, seed=3)


@pytest.fixture
def small_params(small_cfg):
    return derive_params(small_cfg)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

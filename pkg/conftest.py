import os

import pytest

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: exhaustive or large simulations")


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def fixture(fixtures):
    def path(*parts):
        return os.path.join(fixtures, *parts)
    return path

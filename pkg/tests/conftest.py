import numpy as np
import pytest

from orbitlab.builtins import builtin_family


@pytest.fixture(scope="session")
def example():
    return builtin_family("example-graph")


@pytest.fixture(scope="session")
def balan():
    return builtin_family("balan")


@pytest.fixture(scope="session")
def counterexample():
    return builtin_family("counterexample")


@pytest.fixture(scope="session")
def plane():
    return builtin_family("plane")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

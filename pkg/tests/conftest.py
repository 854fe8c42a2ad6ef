import numpy as np
import pytest

from exceedmc.markov_additive import example1_model, example2_model

THETA_15 = -0.50774
THETA_27 = 0.81597


@pytest.fixture(scope="session")
def ex1():
    return example1_model()


@pytest.fixture(scope="session")
def ex2():
    return example2_model()


def example1_region(mu):
    return (mu[:, 0] >= 2.7 - 1e-12) | (mu[:, 0] <= 1.5 + 1e-12)


def within(value, target, se):
    return abs(value - target) <= 4 * se


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

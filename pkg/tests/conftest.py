import pytest

from src.data.pipeline import generate_dataset
from src.models.base import TrainConfig, make_env


@pytest.fixture
def pendulum():
    return make_env("damped-pendulum")


@pytest.fixture
def polynomial():
    return make_env("polynomial")


@pytest.fixture
def double_pendulum():
    return make_env("double-pendulum")


@pytest.fixture
def tiny_cfg():
    return TrainConfig(T=2, beta=0.9, batch_size=4, epochs=3, hidden_width=8, log_every=1)


@pytest.fixture
def pendulum_data(pendulum):
    return generate_dataset(pendulum, m=40, window=2, seed=0, test_transitions=8)


@pytest.fixture
def polynomial_data(polynomial):
    return generate_dataset(polynomial, m=40, window=2, seed=0, test_transitions=8)

import math

import numpy as np
import pytest

from src.data.environments import (double_pendulum_deriv, double_pendulum_energy, env_step, pendulum_deriv,
                                   poly_step, rk4_step, rollout)
from src.errors import EnvError
from src.models.base import make_env


def test_poly_step_examples(polynomial):
    assert np.array_equal(poly_step(np.zeros(3), polynomial), np.zeros(3))
    assert np.allclose(poly_step(np.ones(3), polynomial), [0.85, 0.90, 1.80])

    five = make_env("polynomial", n_poly=5)
    assert poly_step(np.array([2.0, 0.0, 0.0]), five)[2] == pytest.approx(12.6)


def test_poly_step_without_coupling_is_linear():
    spec = make_env("polynomial", b_coeffs=[0.0])
    x = np.array([0.3, -0.7, 1.1])
    assert np.allclose(poly_step(2.5 * x, spec), 2.5 * np.array([0.85, 0.9, 0.9]) * x)


def test_poly_step_rejects_other_kinds(pendulum):
    with pytest.raises(ValueError):
        poly_step(np.zeros(3), pendulum)


def test_pendulum_deriv_examples(pendulum):
    assert np.allclose(pendulum_deriv(np.zeros(2), np.zeros(1), pendulum), [0.0, 0.0])
    assert np.allclose(pendulum_deriv(np.array([math.pi, 0.0]), np.zeros(1), pendulum), [0.0, 0.0], atol=1e-12)
    assert np.allclose(pendulum_deriv(np.array([math.pi / 2, 0.0]), np.zeros(1), pendulum), [0.0, -9.81])


def test_double_pendulum_rest_and_symmetry(double_pendulum):
    assert np.allclose(double_pendulum_deriv(np.zeros(4), np.zeros(2), double_pendulum), 0.0)
    x = np.array([0.4, -0.9, 1.3, 0.2])
    d = double_pendulum_deriv(x, np.zeros(2), double_pendulum)
    assert np.allclose(double_pendulum_deriv(-x, np.zeros(2), double_pendulum), -d)


def test_double_pendulum_conserves_energy_without_damping():
    spec = make_env("double-pendulum", damping=0.0)
    deriv = lambda x, u: double_pendulum_deriv(x, u, spec)
    x = np.array([0.5, -0.3, 0.0, 0.2])
    e0 = double_pendulum_energy(x, spec)
    for _ in range(1000):
        x = rk4_step(deriv, x, np.zeros(2), 0.001)
    assert abs(double_pendulum_energy(x, spec) - e0) / abs(e0) < 1e-6


def test_rk4_examples():
    x = np.array([0.7, -1.0])
    assert np.array_equal(rk4_step(lambda x, u: np.zeros_like(x), x, np.zeros(0), 0.1), x)
    y = rk4_step(lambda x, u: x, np.array([1.0]), np.zeros(0), 0.1)
    assert y[0] == pytest.approx(1.1051708333333333, abs=1e-12)
    with pytest.raises(ValueError):
        rk4_step(lambda x, u: x, np.array([1.0]), np.zeros(0), 0.0)


def test_rk4_order_of_accuracy():
    deriv = lambda x, u: -2.0 * x
    err = [abs(rk4_step(deriv, np.array([1.0]), np.zeros(0), dt)[0] - math.exp(-2.0 * dt)) for dt in (0.1, 0.05)]
    assert err[0] / err[1] >= 2 ** 4 * 0.9


def test_rk4_flags_non_finite_stage():
    with pytest.raises(EnvError, match="non-finite"):
        rk4_step(lambda x, u: np.array([np.inf]), np.array([1.0]), np.zeros(0), 0.1)


def test_pendulum_step_matches_fine_euler(pendulum):
    x0 = np.array([math.pi / 2, 0.0])
    coarse = env_step(pendulum, x0, np.zeros(1))
    x = x0.copy()
    h = 1e-6
    for _ in range(int(round(pendulum.dt / h))):
        x = x + h * pendulum_deriv(x, np.zeros(1), pendulum)
    assert np.allclose(coarse, x, atol=1e-6)


def test_rollout_shapes_and_regeneration(pendulum, polynomial):
    controls = np.full((5, 1), 0.3)
    states = rollout(pendulum, np.array([0.1, 0.0]), controls)
    assert states.shape == (6, 2)
    assert np.array_equal(rollout(pendulum, states[0], controls), states)

    poly_states = rollout(polynomial, np.array([0.5, 0.5, 0.5]), np.zeros((3, 0)))
    assert poly_states.shape == (4, 3)
    with pytest.raises(ValueError):
        rollout(pendulum, np.zeros(2), np.zeros((5, 2)))


def test_env_spec_validation():
    with pytest.raises(ValueError):
        make_env("damped-pendulum", n_x=3)
    with pytest.raises(ValueError):
        make_env("damped-pendulum", dt=0.0)
    with pytest.raises(ValueError):
        make_env("polynomial", n_poly=2)
    with pytest.raises(ValueError):
        make_env("polynomial", n_poly=5, b_coeffs=[0.1])
    assert make_env("polynomial", n_poly=10).name == "polynomial-n10"

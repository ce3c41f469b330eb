import numpy as np
import pytest

from src.data.environments import rollout
from src.data.pipeline import Dataset, Trajectory, generate_dataset


def test_counts_and_split(pendulum):
    data = generate_dataset(pendulum, m=10, window=5, seed=1, test_transitions=10)
    assert len(data.train_index) == 2
    assert sum(w.length for w in data.train_windows) == 10
    assert not set(data.train_index) & set(data.test_index)


def test_last_window_is_truncated_to_m(pendulum):
    data = generate_dataset(pendulum, m=12, window=5, seed=1, test_transitions=5)
    assert [w.length for w in data.train_windows] == [5, 5, 2]
    X, U, Xn = data.transitions("train")
    assert X.shape == (12, 2) and U.shape == (12, 1) and Xn.shape == (12, 2)


def test_generation_is_deterministic(pendulum):
    a = generate_dataset(pendulum, m=20, window=4, seed=7, test_transitions=8)
    b = generate_dataset(pendulum, m=20, window=4, seed=7, test_transitions=8)
    for wa, wb in zip(a.windows, b.windows):
        assert np.array_equal(wa.states, wb.states)
        assert np.array_equal(wa.controls, wb.controls)
    c = generate_dataset(pendulum, m=20, window=4, seed=8, test_transitions=8)
    assert not np.array_equal(a.windows[0].states, c.windows[0].states)


def test_test_split_does_not_depend_on_m(pendulum):
    small = generate_dataset(pendulum, m=10, window=5, seed=3, test_transitions=10)
    large = generate_dataset(pendulum, m=40, window=5, seed=3, test_transitions=10)
    for ws, wl in zip(small.test_windows, large.test_windows):
        assert np.array_equal(ws.states, wl.states)


def test_polynomial_initial_states_in_cube(polynomial):
    data = generate_dataset(polynomial, m=200, window=5, seed=0, test_transitions=20)
    starts = np.array([w.states[0] for w in data.windows])
    assert np.all(starts >= -1.0) and np.all(starts <= 1.0)
    assert data.windows[0].controls.shape == (5, 0)


def test_controls_inside_bounds_and_windows_regenerate(pendulum):
    data = generate_dataset(pendulum, m=30, window=3, seed=2, test_transitions=6)
    for w in data.windows:
        assert np.all(np.abs(w.controls) <= pendulum.u_bound)
        assert np.array_equal(rollout(pendulum, w.states[0], w.controls), w.states)


def test_window_arrays(pendulum_data):
    S, U = pendulum_data.window_arrays("train", 2)
    assert S.shape == (20, 3, 2) and U.shape == (20, 2, 1)
    with pytest.raises(ValueError):
        pendulum_data.window_arrays("train", 3)
    with pytest.raises(ValueError):
        pendulum_data.window_arrays("validation", 2)


def test_bad_arguments(pendulum):
    with pytest.raises(ValueError):
        generate_dataset(pendulum, m=3, window=5, seed=0)
    with pytest.raises(ValueError):
        generate_dataset(pendulum, m=3, window=0, seed=0)


def test_dataset_invariants(pendulum):
    w = Trajectory(states=np.zeros((3, 2)), controls=np.zeros((2, 1)))
    with pytest.raises(ValueError):
        Dataset(env=pendulum, seed=0, m=2, window=2, windows=[w, w], train_index=[0], test_index=[0])
    with pytest.raises(ValueError):
        Dataset(env=pendulum, seed=0, m=5, window=2, windows=[w, w], train_index=[0], test_index=[1])
    with pytest.raises(ValueError):
        Trajectory(states=np.zeros((3, 2)), controls=np.zeros((3, 1)))

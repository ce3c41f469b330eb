import numpy as np
import pytest

from src.errors import NumericsError
from src.logic.numerics import (adam_step, as_controls, cond_spd, finite_diff_grad, make_rng, pinv,
                                power_iteration, svd)
from src.models.base import AdamState


def test_svd_identity_and_diagonal():
    _, S, _ = svd(np.eye(3))
    assert np.allclose(S, [1.0, 1.0, 1.0])

    U, S, Vt = svd(np.diag([3.0, 1.0]))
    assert np.allclose(S, [3.0, 1.0])
    assert np.allclose(np.abs(U), np.eye(2))
    assert np.allclose(np.abs(Vt), np.eye(2))


def test_svd_reconstructs_random_matrix():
    M = make_rng(11).standard_normal((4, 3))
    U, S, Vt = svd(M)
    assert np.linalg.norm(U @ np.diag(S) @ Vt - M) / np.linalg.norm(M) < 1e-10
    assert np.allclose(U.T @ U, np.eye(3), atol=1e-9)
    assert np.all(np.diff(S) <= 0)


def test_svd_rejects_non_finite():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


def test_svd_retries_on_the_transpose(monkeypatch):
    real_svd, calls = np.linalg.svd, []

    def flaky(a, full_matrices=True):
        calls.append(a.shape)
        if len(calls) == 1:
            raise np.linalg.LinAlgError("SVD did not converge")
        return real_svd(a, full_matrices=full_matrices)

    monkeypatch.setattr(np.linalg, "svd", flaky)
    M = make_rng(12).standard_normal((2, 3))
    U, S, Vt = svd(M)
    assert calls == [(2, 3), (3, 2)]
    assert np.allclose(U @ np.diag(S) @ Vt, M, atol=1e-12)


def test_svd_failure_reports_the_iteration_cap(monkeypatch):
    def broken(a, full_matrices=True):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setattr(np.linalg, "svd", broken)
    with pytest.raises(NumericsError, match="iteration cap of 24 QR sweeps"):
        svd(np.ones((2, 3)))


def test_pinv_examples():
    assert np.allclose(pinv(np.eye(2)), np.eye(2))
    assert np.allclose(pinv(np.array([[1.0], [1.0]])), [[0.5, 0.5]])


def test_pinv_penrose_identities():
    M = make_rng(3).standard_normal((5, 3))
    Mp = pinv(M)
    assert np.allclose(M @ Mp @ M, M, atol=1e-9)
    assert np.allclose(Mp @ M @ Mp, Mp, atol=1e-9)
    assert np.allclose((M @ Mp).T, M @ Mp, atol=1e-8)
    assert np.allclose((Mp @ M).T, Mp @ M, atol=1e-8)


def test_pinv_ridge_matches_formula():
    M = make_rng(4).standard_normal((6, 2))
    expected = np.linalg.inv(M.T @ M + 0.3 * np.eye(2)) @ M.T
    assert np.allclose(pinv(M, 0.3), expected, atol=1e-12)
    with pytest.raises(ValueError):
        pinv(M, -1.0)


def test_pinv_drops_tiny_singular_values():
    M = np.diag([1.0, 1e-14])
    assert np.allclose(pinv(M), np.diag([1.0, 0.0]))


def test_cond_spd_examples():
    assert cond_spd(np.eye(4)) == pytest.approx(1.0)
    assert cond_spd(np.diag([4.0, 1.0])) == pytest.approx(4.0)
    assert cond_spd(np.diag([1.0, 0.0])) == float("inf")


def test_cond_spd_known_spectrum_and_scale_invariance():
    Q, _ = np.linalg.qr(make_rng(5).standard_normal((5, 5)))
    D = np.array([10.0, 5.0, 2.0, 1.0, 0.5])
    M = Q.T @ np.diag(D) @ Q
    assert cond_spd(M) == pytest.approx(20.0, rel=1e-8)
    assert cond_spd(7.5 * M) == pytest.approx(cond_spd(M), rel=1e-9)


def test_cond_spd_rejects_asymmetric():
    with pytest.raises(ValueError):
        cond_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_power_iteration_largest_eigenvalue():
    assert power_iteration(np.diag([3.0, 1.0, 0.5])) == pytest.approx(3.0, rel=1e-6)
    assert power_iteration(np.zeros((2, 2))) == 0.0


def test_power_iteration_when_ones_vector_is_an_eigenvector():
    M = np.array([[2.0, -1.0], [-1.0, 2.0]])
    assert power_iteration(M) == pytest.approx(3.0, rel=1e-10)
    assert power_iteration(M, rng=make_rng(9)) == pytest.approx(3.0, rel=1e-10)


def test_rng_streams_are_reproducible_and_independent():
    a = make_rng(42, 0).standard_normal(1000)
    b = make_rng(42, 0).standard_normal(1000)
    c = make_rng(42, 1).standard_normal(1000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_adam_zero_gradient_keeps_params():
    state = AdamState.zeros(3, learning_rate=0.1)
    params = np.array([1.0, -2.0, 0.5])
    new, new_state = adam_step(params, np.zeros(3), state)
    assert np.array_equal(new, params)
    assert new_state.step == 1


def test_adam_first_step_is_learning_rate():
    state = AdamState.zeros(1, learning_rate=0.1)
    p, state = adam_step(np.array([0.0]), np.array([1.0]), state)
    assert p[0] == pytest.approx(-0.1, abs=1e-8)

    first = abs(p[0])
    p2, _ = adam_step(p, np.array([1.0]), state)
    assert abs(p2[0] - p[0]) <= first + 1e-12


def test_adam_is_pure():
    state = AdamState.zeros(2, learning_rate=0.01)
    params, grads = np.array([0.3, -0.1]), np.array([0.2, 0.4])
    out1 = adam_step(params, grads, state)
    out2 = adam_step(params, grads, state)
    assert np.array_equal(out1[0], out2[0])
    assert state.step == 0 and np.array_equal(state.m, np.zeros(2))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2))


def test_finite_diff_examples():
    assert finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)[0] == pytest.approx(6.0, abs=1e-8)
    assert np.allclose(finite_diff_grad(lambda x: 4.0, np.ones(3)), 0.0, atol=1e-10)
    g = finite_diff_grad(lambda x: float(np.sin(x[0]) + x[1] ** 2), np.array([0.0, 2.0]), h=1e-5)
    assert np.allclose(g, [1.0, 4.0], atol=1e-8)


def test_finite_diff_reports_non_finite_index():
    with pytest.raises(NumericsError, match="index 1"):
        finite_diff_grad(lambda x: float("nan") if x[1] != 0 else 0.0, np.zeros(2), indices=[1])


def test_as_controls_shapes():
    assert as_controls([0.1, 0.2], 1).shape == (2, 1)
    assert as_controls(np.zeros((4, 0)), 0).shape == (4, 0)
    with pytest.raises(ValueError):
        as_controls(np.zeros(4), 0)
    with pytest.raises(ValueError):
        as_controls(np.zeros((3, 2)), 1)
